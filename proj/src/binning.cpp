#include "terrapov/binning.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

namespace terrapov::binning {

namespace {

double log_normal(double x, double mean, double var)
{
	const double d = x - mean;
	return -0.5 * std::log(2.0 * std::numbers::pi * var) - d * d / (2.0 * var);
}

// Linear-interpolation quantile of sorted data.
double quantile(const std::vector<double>& sorted, double q)
{
	const double pos = q * static_cast<double>(sorted.size() - 1);
	const auto lo = static_cast<std::size_t>(std::floor(pos));
	const auto hi = std::min(lo + 1, sorted.size() - 1);
	const double frac = pos - static_cast<double>(lo);
	return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

struct Params
{
	Eigen::VectorXd w, mu, var;
};

// E-step: fills responsibilities and returns the total log-likelihood.
double expectation(std::span<const double> x, const Params& p, Eigen::MatrixXd& resp)
{
	const Eigen::Index n = static_cast<Eigen::Index>(x.size());
	const Eigen::Index k = p.mu.size();
	resp.resize(n, k);
	double ll = 0.0;
	for (Eigen::Index i = 0; i < n; ++i) {
		double mx = -std::numeric_limits<double>::infinity();
		for (Eigen::Index j = 0; j < k; ++j) {
			const double lw = p.w[j] > 0.0 ? std::log(p.w[j]) : -std::numeric_limits<double>::infinity();
			resp(i, j) = lw + log_normal(x[i], p.mu[j], p.var[j]);
			mx = std::max(mx, resp(i, j));
		}
		double s = 0.0;
		for (Eigen::Index j = 0; j < k; ++j)
			s += std::exp(resp(i, j) - mx);
		const double lse = mx + std::log(s);
		for (Eigen::Index j = 0; j < k; ++j)
			resp(i, j) = std::exp(resp(i, j) - lse);
		ll += lse;
	}
	return ll;
}

void maximization(std::span<const double> x, const Eigen::MatrixXd& resp, double var_floor, Params& p)
{
	const Eigen::Index n = resp.rows();
	for (Eigen::Index j = 0; j < resp.cols(); ++j) {
		const double nk = resp.col(j).sum();
		p.w[j] = nk / static_cast<double>(n);
		if (nk < std::numeric_limits<double>::min())
			continue; // starved component keeps its mean and variance
		double m = 0.0;
		for (Eigen::Index i = 0; i < n; ++i)
			m += resp(i, j) * x[i];
		m /= nk;
		double v = 0.0;
		for (Eigen::Index i = 0; i < n; ++i)
			v += resp(i, j) * (x[i] - m) * (x[i] - m);
		p.mu[j] = m;
		p.var[j] = std::max(v / nk, var_floor);
	}
	p.w /= p.w.sum();
}

GmmModel run_em(std::span<const double> x, Params p, double var_floor, const GmmOptions& opt)
{
	GmmModel m;
	Eigen::MatrixXd resp;
	double ll_prev = expectation(x, p, resp);
	m.log_likelihood_trace.push_back(ll_prev);
	double ll = ll_prev;
	int it = 0;
	while (it < opt.max_iter) {
		maximization(x, resp, var_floor, p);
		ll = expectation(x, p, resp);
		++it;
		m.log_likelihood_trace.push_back(ll);
		if (ll - ll_prev <= opt.tol * std::abs(ll_prev))
			break;
		ll_prev = ll;
	}

	std::vector<Eigen::Index> order(static_cast<std::size_t>(p.mu.size()));
	std::iota(order.begin(), order.end(), 0);
	std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) {
		return p.mu[a] < p.mu[b] || (p.mu[a] == p.mu[b] && p.var[a] < p.var[b]);
	});
	const auto k = p.mu.size();
	m.weights.resize(k);
	m.means.resize(k);
	m.variances.resize(k);
	for (Eigen::Index j = 0; j < k; ++j) {
		m.weights[j] = p.w[order[j]];
		m.means[j] = p.mu[order[j]];
		m.variances[j] = p.var[order[j]];
	}
	m.log_likelihood = ll;
	m.iterations = it;
	return m;
}

} // namespace

GmmModel fit_gmm(std::span<const double> values, const GmmOptions& opt)
{
	const int k = opt.n_components;
	if (k < 1)
		throw BinningError(BinningErrc::TooFewPoints, "fit_gmm: n_components must be >= 1");
	if (values.size() < static_cast<std::size_t>(k))
		throw BinningError(BinningErrc::TooFewPoints, "fit_gmm: " + std::to_string(values.size()) +
		                                                  " values for " + std::to_string(k) + " components");
	for (double v : values)
		if (!std::isfinite(v))
			throw BinningError(BinningErrc::DegenerateData, "fit_gmm: non-finite value");

	// Work on sorted values so the fitted model is independent of input order.
	std::vector<double> sorted(values.begin(), values.end());
	std::sort(sorted.begin(), sorted.end());
	if (sorted.back() - sorted.front() <= 1e-12)
		throw BinningError(BinningErrc::DegenerateData, "fit_gmm: all values are effectively identical");

	const double n = static_cast<double>(sorted.size());
	const double mean = std::accumulate(sorted.begin(), sorted.end(), 0.0) / n;
	double var = 0.0;
	for (double v : sorted)
		var += (v - mean) * (v - mean);
	var /= n;
	const double var_floor = 1e-9 * var;

	Params init{Eigen::VectorXd::Constant(k, 1.0 / k), Eigen::VectorXd(k), Eigen::VectorXd::Constant(k, var)};
	for (int j = 0; j < k; ++j)
		init.mu[j] = quantile(sorted, (2.0 * j + 1.0) / (2.0 * k));

	GmmModel best = run_em(sorted, init, var_floor, opt);
	SplitMix64 rng(hash_seed(opt.seed, {0x676d6dULL}));
	for (int r = 0; r < opt.restarts; ++r) {
		Params p = init;
		for (int j = 0; j < k; ++j)
			p.mu[j] = sorted[static_cast<std::size_t>(rng.below(sorted.size()))];
		GmmModel cand = run_em(sorted, p, var_floor, opt);
		if (cand.log_likelihood > best.log_likelihood)
			best = std::move(cand);
	}
	return best;
}

Eigen::VectorXd posterior(const GmmModel& model, double x)
{
	const auto k = model.means.size();
	Eigen::VectorXd lp(k);
	for (Eigen::Index j = 0; j < k; ++j) {
		lp[j] = (model.weights[j] > 0.0 ? std::log(model.weights[j]) : -std::numeric_limits<double>::infinity()) +
		        log_normal(x, model.means[j], model.variances[j]);
	}
	const double mx = lp.maxCoeff();
	Eigen::VectorXd p = (lp.array() - mx).exp();
	return p / p.sum();
}

int assign_bin(const GmmModel& model, double x)
{
	const Eigen::VectorXd p = posterior(model, x);
	int best = 0;
	for (Eigen::Index j = 1; j < p.size(); ++j)
		if (p[j] > p[best])
			best = static_cast<int>(j);
	return best;
}

nlohmann::json to_json(const GmmModel& model)
{
	auto vec = [](const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
	return {
		{"n_components", model.n_components()},
		{"order", "ascending_mean"},
		{"weights", vec(model.weights)},
		{"means", vec(model.means)},
		{"variances", vec(model.variances)},
		{"log_likelihood", model.log_likelihood},
		{"iterations", model.iterations},
	};
}

GmmModel gmm_from_json(const nlohmann::json& j)
{
	auto vec = [](const nlohmann::json& a) {
		const auto v = a.get<std::vector<double>>();
		return Eigen::VectorXd(Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size())));
	};
	GmmModel m;
	m.weights = vec(j.at("weights"));
	m.means = vec(j.at("means"));
	m.variances = vec(j.at("variances"));
	m.log_likelihood = j.at("log_likelihood").get<double>();
	m.iterations = j.at("iterations").get<int>();
	return m;
}

} // namespace terrapov::binning

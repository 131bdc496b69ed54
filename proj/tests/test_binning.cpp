#include "terrapov/binning.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

using namespace terrapov;
using namespace terrapov::binning;

namespace {

// Best split of sorted data into k contiguous, nonempty groups by
// within-group squared error. Returns the group index of each point.
std::vector<int> best_contiguous_partition(const std::vector<double>& sorted, int k)
{
	const int n = static_cast<int>(sorted.size());
	double best = std::numeric_limits<double>::infinity();
	std::vector<int> best_labels;
	std::vector<int> cuts(static_cast<std::size_t>(k - 1));
	// Enumerate cut positions 0 < c1 < c2 < ... < n.
	auto rec = [&](auto&& self, int idx, int start) -> void {
		if (idx == k - 1) {
			std::vector<int> labels(static_cast<std::size_t>(n));
			double sse = 0;
			int lo = 0;
			for (int g = 0; g < k; ++g) {
				const int hi = g < k - 1 ? cuts[static_cast<std::size_t>(g)] : n;
				double m = 0;
				for (int i = lo; i < hi; ++i)
					m += sorted[static_cast<std::size_t>(i)];
				m /= hi - lo;
				for (int i = lo; i < hi; ++i) {
					sse += (sorted[static_cast<std::size_t>(i)] - m) * (sorted[static_cast<std::size_t>(i)] - m);
					labels[static_cast<std::size_t>(i)] = g;
				}
				lo = hi;
			}
			if (sse < best) {
				best = sse;
				best_labels = labels;
			}
			return;
		}
		for (int c = start; c <= n - (k - 1 - idx); ++c) {
			cuts[static_cast<std::size_t>(idx)] = c;
			self(self, idx + 1, c + 1);
		}
	};
	rec(rec, 0, 1);
	return best_labels;
}

std::vector<double> three_blobs(SplitMix64& rng, int per, double sep, std::vector<int>& truth)
{
	std::vector<double> v;
	truth.clear();
	for (int c = 0; c < 3; ++c)
		for (int i = 0; i < per; ++i) {
			v.push_back(c * sep + rng.normal());
			truth.push_back(c);
		}
	return v;
}

BinningErrc fit_error(const std::vector<double>& v, int k)
{
	try {
		GmmOptions o;
		o.n_components = k;
		fit_gmm(v, o);
	} catch (const BinningError& e) {
		return e.code();
	}
	FAIL("expected a BinningError");
	return BinningErrc::DegenerateData;
}

} // namespace

TEST_CASE("paired fixture recovers three components")
{
	const std::vector<double> v = {0, 0, 10, 10, 20, 20};
	const auto oracle = best_contiguous_partition(v, 3);
	CHECK(oracle == std::vector<int>{0, 0, 1, 1, 2, 2});

	const auto m = fit_gmm(v);
	REQUIRE(m.n_components() == 3);
	CHECK(std::abs(m.means[0] - 0.0) < 1e-6);
	CHECK(std::abs(m.means[1] - 10.0) < 1e-6);
	CHECK(std::abs(m.means[2] - 20.0) < 1e-6);
	for (int j = 0; j < 3; ++j)
		CHECK(m.weights[j] == doctest::Approx(1.0 / 3.0).epsilon(1e-9));
	for (std::size_t i = 0; i < v.size(); ++i)
		CHECK(assign_bin(m, v[i]) == oracle[i]);
}

TEST_CASE("labels agree with the contiguous-partition oracle on separated data")
{
	SplitMix64 rng(4);
	for (int trial = 0; trial < 10; ++trial) {
		std::vector<int> truth;
		auto v = three_blobs(rng, 4, 15.0, truth);
		std::sort(v.begin(), v.end());
		const auto oracle = best_contiguous_partition(v, 3);
		const auto m = fit_gmm(v);
		for (std::size_t i = 0; i < v.size(); ++i)
			CHECK(assign_bin(m, v[i]) == oracle[i]);
	}
}

TEST_CASE("single component is the sample mean and population variance")
{
	const std::vector<double> v = {1, 2, 4, 7, 11};
	GmmOptions o;
	o.n_components = 1;
	const auto m = fit_gmm(v, o);
	CHECK(m.means[0] == doctest::Approx(5.0).epsilon(1e-12));
	CHECK(m.variances[0] == doctest::Approx(13.2).epsilon(1e-12));
	CHECK(m.weights[0] == 1.0);
}

TEST_CASE("degenerate inputs")
{
	CHECK(fit_error({3, 3, 3, 3}, 3) == BinningErrc::DegenerateData);
	CHECK(fit_error({1, 2}, 3) == BinningErrc::TooFewPoints);
	CHECK(fit_error({1, 2, 3}, 0) == BinningErrc::TooFewPoints);
	CHECK(fit_error({1, std::numeric_limits<double>::quiet_NaN(), 3}, 2) == BinningErrc::DegenerateData);
}

TEST_CASE("posterior properties")
{
	GmmModel m;
	m.weights = Eigen::Vector3d(0.2, 0.5, 0.3);
	m.means = Eigen::Vector3d(0, 10, 20);
	m.variances = Eigen::Vector3d(1, 2, 1);
	SplitMix64 rng(1);
	for (int i = 0; i < 500; ++i) {
		const double x = (rng.uniform() - 0.5) * 200.0;
		const auto p = posterior(m, x);
		CHECK(std::abs(p.sum() - 1.0) < 1e-12);
		CHECK(p.minCoeff() >= 0.0);
	}
	CHECK(assign_bin(m, 0.0) == 0);
	CHECK(assign_bin(m, 10.0) == 1);
	CHECK(assign_bin(m, 20.0) == 2);
	// Far outside the data the posterior must still be finite.
	CHECK(std::isfinite(posterior(m, 1e6).sum()));

	GmmModel twins;
	twins.weights = Eigen::Vector2d(0.5, 0.5);
	twins.means = Eigen::Vector2d(3, 3);
	twins.variances = Eigen::Vector2d(2, 2);
	for (double x : {-5.0, 3.0, 40.0}) {
		const auto p = posterior(twins, x);
		CHECK(p[0] == 0.5);
		CHECK(p[1] == 0.5);
		CHECK(assign_bin(twins, x) == 0);
	}
}

TEST_CASE("midpoint of symmetric components goes to the lower bin")
{
	GmmModel m;
	m.weights = Eigen::Vector2d(0.5, 0.5);
	m.means = Eigen::Vector2d(-2, 2);
	m.variances = Eigen::Vector2d(1, 1);
	CHECK(assign_bin(m, 0.0) == 0);
	CHECK(assign_bin(m, 1e-9) == 1);
}

TEST_CASE("well separated blobs are labelled perfectly")
{
	SplitMix64 rng(12);
	for (int trial = 0; trial < 5; ++trial) {
		std::vector<int> truth;
		const auto v = three_blobs(rng, 40, 8.0, truth);
		const auto m = fit_gmm(v);
		CHECK(m.means[0] < m.means[1]);
		CHECK(m.means[1] < m.means[2]);
		int right = 0;
		for (std::size_t i = 0; i < v.size(); ++i)
			right += assign_bin(m, v[i]) == truth[i];
		CHECK(right == static_cast<int>(v.size()));
		CHECK(assign_bin(m, *std::min_element(v.begin(), v.end())) == 0);
	}
}

TEST_CASE("EM log-likelihood never decreases")
{
	SplitMix64 rng(99);
	for (int trial = 0; trial < 20; ++trial) {
		std::vector<double> v;
		const int n = 10 + static_cast<int>(rng.below(100));
		for (int i = 0; i < n; ++i)
			v.push_back(rng.normal() * 3.0 + (rng.coin() ? 5.0 : 0.0));
		GmmOptions o;
		o.n_components = 1 + static_cast<int>(rng.below(4));
		const auto m = fit_gmm(v, o);
		REQUIRE(m.log_likelihood_trace.size() == static_cast<std::size_t>(m.iterations) + 1);
		for (std::size_t i = 1; i < m.log_likelihood_trace.size(); ++i)
			CHECK(m.log_likelihood_trace[i] >= m.log_likelihood_trace[i - 1] - 1e-9);
		CHECK(m.log_likelihood == m.log_likelihood_trace.back());
		CHECK(std::abs(m.weights.sum() - 1.0) <= 1e-12);
		const double mean = std::accumulate(v.begin(), v.end(), 0.0) / n;
		double var = 0;
		for (double x : v)
			var += (x - mean) * (x - mean);
		var /= n;
		CHECK(m.variances.minCoeff() >= 1e-9 * var);
	}
}

TEST_CASE("input order does not matter")
{
	SplitMix64 rng(6);
	std::vector<int> truth;
	auto v = three_blobs(rng, 20, 3.0, truth);
	const auto a = fit_gmm(v);
	for (int k = 0; k < 5; ++k) {
		shuffle(v, rng);
		const auto b = fit_gmm(v);
		CHECK(b.means == a.means);
		CHECK(b.variances == a.variances);
		CHECK(b.weights == a.weights);
		CHECK(b.iterations == a.iterations);
	}
}

TEST_CASE("shifting the data shifts the means")
{
	SplitMix64 rng(21);
	std::vector<int> truth;
	const auto v = three_blobs(rng, 25, 6.0, truth);
	const auto a = fit_gmm(v);
	for (double c : {-17.5, 0.25, 1000.0}) {
		std::vector<double> s = v;
		for (auto& x : s)
			x += c;
		const auto b = fit_gmm(s);
		for (int j = 0; j < 3; ++j) {
			CHECK(b.means[j] == doctest::Approx(a.means[j] + c).epsilon(1e-9));
			CHECK(b.variances[j] == doctest::Approx(a.variances[j]).epsilon(1e-6));
			CHECK(b.weights[j] == doctest::Approx(a.weights[j]).epsilon(1e-6));
		}
		for (std::size_t i = 0; i < v.size(); ++i)
			CHECK(assign_bin(b, s[i]) == assign_bin(a, v[i]));
	}
}

TEST_CASE("restarts are seeded and never worse")
{
	SplitMix64 rng(3);
	std::vector<int> truth;
	const auto v = three_blobs(rng, 15, 2.0, truth);
	GmmOptions o;
	const auto base = fit_gmm(v, o);
	o.restarts = 5;
	o.seed = 10;
	const auto r1 = fit_gmm(v, o);
	const auto r2 = fit_gmm(v, o);
	CHECK(r1.log_likelihood >= base.log_likelihood);
	CHECK(r1.means == r2.means);
}

TEST_CASE("json round trip")
{
	const std::vector<double> v = {0, 0.5, 10, 10.5, 20, 21};
	const auto m = fit_gmm(v);
	const auto back = gmm_from_json(to_json(m));
	CHECK(back.means == m.means);
	CHECK(back.variances == m.variances);
	CHECK(back.weights == m.weights);
	CHECK(to_json(m)["order"] == "ascending_mean");
}

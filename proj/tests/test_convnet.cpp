#include "terrapov/convnet.hpp"

#include <doctest.h>

#include <cmath>
#include <functional>
#include <numbers>
#include <set>

using namespace terrapov;
using namespace terrapov::convnet;

namespace {

NetworkConfig tiny_config()
{
	NetworkConfig c;
	c.preset = "tiny";
	c.input_size = 8;
	c.conv_channels = {2, 3};
	c.pool_after = {1, 2};
	c.fc_widths = {5, 4};
	c.n_classes = 3;
	return c;
}

Batch<double> random_batch(SplitMix64& rng, int n, int side)
{
	Batch<double> b;
	b.height = b.width = side;
	for (int i = 0; i < n; ++i) {
		Matrix<double> img(3, side * side);
		for (Eigen::Index k = 0; k < img.size(); ++k)
			img.data()[k] = rng.normal();
		b.images.push_back(img);
	}
	return b;
}

// Every scalar parameter of a model, in a fixed order.
std::vector<double*> parameters(ModelWeights<double>& w)
{
	std::vector<double*> out;
	auto add = [&](auto& m) {
		for (Eigen::Index k = 0; k < m.size(); ++k)
			out.push_back(m.data() + k);
	};
	for (auto& c : w.conv) {
		add(c.kernel);
		add(c.bias);
	}
	for (auto& d : w.dense) {
		add(d.weight);
		add(d.bias);
	}
	return out;
}

tiles::Tile random_tile(SplitMix64& rng, const std::string& id, int index, int side = 64)
{
	tiles::TileSpec s;
	s.cluster_id = id;
	s.tile_index = index;
	s.width = s.height = side;
	const tiles::SceneLatent latent{rng.uniform() * 3.0, rng.uniform() * 0.5, 12.0};
	return tiles::generate_synthetic(s, latent, rng.next());
}

// Small synthetic set where the label is the temperature bin.
void bin_dataset(int clusters, int per_cluster, std::vector<tiles::Tile>& tiles, std::vector<int>& labels)
{
	SplitMix64 rng(55);
	for (int c = 0; c < clusters; ++c) {
		const int bin = c % 3;
		const double t = 0.5 + bin + 0.1 * rng.normal();
		for (int k = 0; k < per_cluster; ++k) {
			tiles::TileSpec s;
			s.cluster_id = "C" + std::to_string(c);
			s.tile_index = k;
			tiles.push_back(tiles::generate_synthetic(s, {t, 0.15, 12.0}, 7));
			labels.push_back(bin);
		}
	}
}

ConvnetErrc convnet_error(const std::function<void()>& f)
{
	try {
		f();
	} catch (const ConvnetError& e) {
		return e.code();
	}
	FAIL("expected a ConvnetError");
	return ConvnetErrc::InvalidConfig;
}

} // namespace

TEST_CASE("preset shapes")
{
	const auto mini = NetworkConfig::mini();
	const auto w = build_network<float>(mini, 1);
	CHECK(w.conv_shape(0) == std::array<int, 4>{16, 3, 3, 3});
	CHECK(w.conv_shape(2) == std::array<int, 4>{64, 32, 3, 3});
	CHECK(mini.flatten_size() == 64 * 8 * 8);
	CHECK(w.dense[0].weight.cols() == mini.flatten_size());
	CHECK(w.dense[2].weight.rows() == 3);

	const auto vgg = NetworkConfig::vgg11();
	CHECK(vgg.input_size == 224);
	CHECK(vgg.flatten_size() == 25088);
	CHECK(vgg.fc_widths == std::array<int, 2>{4096, 4096});
	CHECK(vgg.conv_channels == std::vector<int>{64, 128, 256, 256, 512, 512, 512, 512});
	CHECK(NetworkConfig::from_preset("vgg11") == vgg);
	CHECK(convnet_error([] { NetworkConfig::from_preset("resnet"); }) == ConvnetErrc::InvalidConfig);
	CHECK(NetworkConfig::from_json(mini.to_json()) == mini);
	CHECK(mini.digest() != vgg.digest());

	auto bad = mini;
	bad.conv_channels = {32, 16, 64};
	CHECK(convnet_error([&] { bad.validate(); }) == ConvnetErrc::InvalidConfig);
	bad = mini;
	bad.input_size = 60;
	CHECK(convnet_error([&] { bad.validate(); }) == ConvnetErrc::InvalidConfig);
}

TEST_CASE("initialization is seeded He-normal with zero biases")
{
	const auto a = build_network<float>(NetworkConfig::mini(), 9);
	CHECK(a == build_network<float>(NetworkConfig::mini(), 9));
	CHECK(!(a == build_network<float>(NetworkConfig::mini(), 10)));
	CHECK(a.all_finite());
	CHECK(a.conv[0].bias.isZero());
	CHECK(a.dense[1].bias.isZero());
	// Sample variance of the big FC matrix should sit near 2 / fan_in.
	const auto& m = a.dense[0].weight;
	const double var = m.cast<double>().array().square().mean();
	CHECK(var == doctest::Approx(2.0 / m.cols()).epsilon(0.02));
}

TEST_CASE("analytic gradients match central differences in double precision")
{
	SplitMix64 rng(123);
	auto w = build_network<double>(tiny_config(), 4);
	// Nonzero biases so every code path is exercised.
	for (auto& c : w.conv)
		for (Eigen::Index k = 0; k < c.bias.size(); ++k)
			c.bias[k] = 0.1 * rng.normal();
	const auto batch = random_batch(rng, 3, 8);
	const std::vector<int> labels = {0, 2, 1};

	auto grad = w.zeros_like();
	loss_and_gradient(w, batch, labels, grad);
	auto g_params = parameters(grad);
	auto w_params = parameters(w);
	REQUIRE(g_params.size() == w_params.size());

	const double eps = 1e-6;
	int checked = 0, bad = 0;
	for (std::size_t i = 0; i < w_params.size(); ++i) {
		const double orig = *w_params[i];
		*w_params[i] = orig + eps;
		const double up = batch_loss(w, batch, labels);
		*w_params[i] = orig - eps;
		const double down = batch_loss(w, batch, labels);
		*w_params[i] = orig;
		const double numeric = (up - down) / (2 * eps);
		const double analytic = *g_params[i];
		const double scale = std::max(std::abs(numeric), std::abs(analytic));
		++checked;
		if (scale < 1e-7) {
			if (std::abs(numeric - analytic) > 1e-9)
				++bad;
			continue;
		}
		if (std::abs(numeric - analytic) / scale > 1e-4) {
			++bad;
			MESSAGE("parameter " << i << ": analytic " << analytic << " numeric " << numeric);
		}
	}
	CHECK(checked == static_cast<int>(w_params.size()));
	CHECK(bad == 0);
}

TEST_CASE("float gradients agree with double gradients")
{
	SplitMix64 rng(8);
	const auto wd = build_network<double>(tiny_config(), 2);
	const auto bd = random_batch(rng, 4, 8);
	const std::vector<int> labels = {1, 0, 2, 2};
	auto gd = wd.zeros_like();
	loss_and_gradient(wd, bd, labels, gd);

	const auto wf = wd.cast<float>();
	Batch<float> bf;
	bf.height = bf.width = 8;
	for (const auto& img : bd.images)
		bf.images.push_back(img.cast<float>());
	auto gf = wf.zeros_like();
	loss_and_gradient(wf, bf, labels, gf);
	const auto gfd = gf.cast<double>();
	for (std::size_t l = 0; l < gd.conv.size(); ++l)
		CHECK((gfd.conv[l].kernel - gd.conv[l].kernel).norm() <= 1e-3 * gd.conv[l].kernel.norm());
	for (std::size_t l = 0; l < gd.dense.size(); ++l)
		CHECK((gfd.dense[l].weight - gd.dense[l].weight).norm() <= 1e-3 * gd.dense[l].weight.norm());
}

TEST_CASE("frozen conv stack gets no gradient")
{
	SplitMix64 rng(3);
	const auto w = build_network<double>(tiny_config(), 5);
	const auto batch = random_batch(rng, 2, 8);
	auto full = w.zeros_like(), frozen = w.zeros_like();
	const double l1 = loss_and_gradient(w, batch, {0, 1}, full);
	const double l2 = loss_and_gradient(w, batch, {0, 1}, frozen, true);
	CHECK(l1 == l2);
	for (const auto& c : frozen.conv)
		CHECK(c.kernel.isZero());
	for (std::size_t i = 0; i < 3; ++i)
		CHECK(frozen.dense[i].weight == full.dense[i].weight);

	auto moved = w;
	auto vel = w.zeros_like();
	sgd_step(moved, vel, full, 0.1, 0.9, true);
	for (std::size_t i = 0; i < w.conv.size(); ++i)
		CHECK(moved.conv[i].kernel == w.conv[i].kernel);
	CHECK(moved.dense[0].weight != w.dense[0].weight);
}

TEST_CASE("max-pool backward routes to argmax only")
{
	SplitMix64 rng(1);
	Matrix<double> in(4, 36);
	for (Eigen::Index k = 0; k < in.size(); ++k)
		in.data()[k] = rng.normal();
	Eigen::MatrixXi arg;
	const auto out = maxpool_forward(in, 6, 6, arg);
	REQUIRE(out.cols() == 9);
	Matrix<double> dout(4, 9);
	for (Eigen::Index k = 0; k < dout.size(); ++k)
		dout.data()[k] = rng.normal();
	const auto din = maxpool_backward(dout, arg, 6, 6);
	CHECK(din.cwiseAbs().sum() == doctest::Approx(dout.cwiseAbs().sum()).epsilon(1e-14));
	int nonzero = 0;
	for (Eigen::Index ch = 0; ch < 4; ++ch)
		for (Eigen::Index p = 0; p < 36; ++p)
			if (din(ch, p) != 0.0) {
				++nonzero;
				// The receiving input must be the maximum of its window.
				const int y = static_cast<int>(p) / 6 / 2, x = static_cast<int>(p) % 6 / 2;
				CHECK(in(ch, p) == out(ch, y * 3 + x));
			}
	CHECK(nonzero == 36);
}

TEST_CASE("uniform logits cost ln 3")
{
	const auto w = zero_network<double>(tiny_config());
	SplitMix64 rng(2);
	const auto batch = random_batch(rng, 5, 8);
	const double loss = batch_loss(w, batch, {0, 1, 2, 0, 1});
	CHECK(std::abs(loss - std::log(3.0)) <= 1e-9);

	Matrix<double> d;
	const Matrix<double> logits = Matrix<double>::Constant(3, 2, 7.5);
	CHECK(std::abs(softmax_cross_entropy(logits, {2, 0}, d) - std::log(3.0)) <= 1e-12);
	CHECK(std::abs(d.sum()) < 1e-15);
}

TEST_CASE("one small SGD step lowers the example's loss")
{
	SplitMix64 rng(19);
	for (int trial = 0; trial < 3; ++trial) {
		auto w = build_network<double>(NetworkConfig::mini(), 100 + trial);
		const auto batch = random_batch(rng, 1, 64);
		const std::vector<int> y = {trial};
		auto g = w.zeros_like();
		const double before = loss_and_gradient(w, batch, y, g);
		auto v = w.zeros_like();
		sgd_step(w, v, g, 1e-4, 0.0, false);
		CHECK(batch_loss(w, batch, y) < before);
	}
}

TEST_CASE("normalization statistics")
{
	SplitMix64 rng(6);
	std::vector<tiles::Tile> ts;
	for (int i = 0; i < 6; ++i) {
		auto t = random_tile(rng, "A", i);
		for (std::size_t p = 1; p < t.pixels.size(); p += 3)
			t.pixels[p] = 77; // constant green channel
		ts.push_back(t);
	}
	const auto stats = compute_norm_stats(ts);
	CHECK(stats.std[1] == 1.0);
	CHECK(stats.mean[1] == doctest::Approx(77.0 / 255.0));
	const auto b = normalize_batch<double>(ts, stats);
	double s[3] = {0, 0, 0}, s2[3] = {0, 0, 0};
	std::size_t n = 0;
	for (const auto& img : b.images) {
		for (int c = 0; c < 3; ++c) {
			s[c] += img.row(c).sum();
			s2[c] += img.row(c).squaredNorm();
		}
		n += static_cast<std::size_t>(img.cols());
	}
	CHECK(std::abs(s[0] / n) < 1e-6);
	CHECK(std::abs(s[2] / n) < 1e-6);
	CHECK(std::abs(std::sqrt(s2[0] / n) - 1.0) < 1e-3);
	CHECK(std::abs(std::sqrt(s2[2] / n) - 1.0) < 1e-3);
	CHECK(s2[1] == 0.0);

	// Subset statistics only look at the given indices.
	const std::vector<std::size_t> first = {0};
	const std::vector<tiles::Tile> only_first = {ts[0]};
	const auto sub = compute_norm_stats(ts, first);
	const auto direct = compute_norm_stats(only_first);
	CHECK(sub.mean == direct.mean);
	CHECK(sub.std == direct.std);

	const auto again = normalize_batch<double>(ts, stats);
	CHECK(again.images[3] == b.images[3]);
	const auto back = NormStats::from_json(stats.to_json());
	CHECK(back.mean == stats.mean);
	CHECK(back.std == stats.std);
}

TEST_CASE("augmentation")
{
	SplitMix64 rng(7);
	auto b = random_batch(rng, 16, 8);
	const auto orig = b;

	augment_batch(b, 5, {false, false});
	for (std::size_t i = 0; i < b.images.size(); ++i)
		CHECK(b.images[i] == orig.images[i]);

	auto img = orig.images[0];
	hflip(img, 8, 8);
	CHECK(img.col(7) == orig.images[0].col(0));
	CHECK(img.col(8 * 3 + 2) == orig.images[0].col(8 * 3 + 5));
	hflip(img, 8, 8);
	CHECK(img == orig.images[0]);
	vflip(img, 8, 8);
	CHECK(img.col(56) == orig.images[0].col(0));
	vflip(img, 8, 8);
	CHECK(img == orig.images[0]);

	auto a1 = orig, a2 = orig;
	augment_batch(a1, 42, {});
	augment_batch(a2, 42, {});
	int changed = 0;
	for (std::size_t i = 0; i < a1.images.size(); ++i) {
		CHECK(a1.images[i] == a2.images[i]);
		changed += a1.images[i] != orig.images[i];
	}
	CHECK(changed > 0);
	CHECK(changed < 16);
}

TEST_CASE("weights file round trip and errors")
{
	const auto cfg = tiny_config();
	const auto w = build_network<float>(cfg, 77);
	const auto bytes = save_weights(w);
	CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "TPW1");
	CHECK(load_weights(bytes, cfg) == w);

	auto other = cfg;
	other.fc_widths = {6, 4};
	CHECK(convnet_error([&] { load_weights(bytes, other); }) == ConvnetErrc::ConfigMismatch);
	auto cut = bytes;
	cut.resize(cut.size() - 3);
	CHECK(convnet_error([&] { load_weights(cut, cfg); }) == ConvnetErrc::Truncated);
	cut.resize(6);
	CHECK(convnet_error([&] { load_weights(cut, cfg); }) == ConvnetErrc::Truncated);
	auto magic = bytes;
	magic[0] = 'X';
	CHECK(convnet_error([&] { load_weights(magic, cfg); }) == ConvnetErrc::BadMagic);
	auto extra = bytes;
	extra.push_back(0);
	CHECK_THROWS_AS(load_weights(extra, cfg), ConvnetError);
}

TEST_CASE("memorizes a single batch of eight tiles")
{
	SplitMix64 rng(31);
	std::vector<tiles::Tile> ts;
	std::vector<int> labels;
	for (int i = 0; i < 8; ++i) {
		ts.push_back(random_tile(rng, "M" + std::to_string(i), 0));
		labels.push_back(i % 3);
	}
	TrainConfig tc;
	tc.epochs = 200;
	tc.phase1_epochs = 10;
	tc.batch_size = 8;
	tc.val_fraction = 0.0;
	tc.augment = {false, false};
	tc.seed = 4;
	const auto res = train(build_network<float>(NetworkConfig::mini(), 1), ts, labels, tc);
	CHECK(res.val_indices.empty());
	CHECK(res.train_accuracy == 1.0);
	CHECK(res.history.back().train_loss < 0.01);
	CHECK(std::isnan(res.history.back().val_accuracy));
	CHECK(res.history.size() == 200);
	CHECK(res.history[9].phase == 1);
	CHECK(res.history[10].phase == 2);
}

TEST_CASE("two-phase training: freeze, determinism, consistency")
{
	std::vector<tiles::Tile> ts;
	std::vector<int> labels;
	bin_dataset(15, 3, ts, labels);
	const auto init = build_network<float>(NetworkConfig::mini(), 3);
	TrainConfig tc;
	tc.epochs = 3;
	tc.phase1_epochs = 3;
	tc.seed = 11;

	const auto frozen = train(init, ts, labels, tc);
	for (std::size_t i = 0; i < init.conv.size(); ++i) {
		CHECK(frozen.weights.conv[i].kernel == init.conv[i].kernel);
		CHECK(frozen.weights.conv[i].bias == init.conv[i].bias);
	}
	CHECK(frozen.weights.dense[0].weight != init.dense[0].weight);

	tc.epochs = 4;
	tc.phase1_epochs = 2;
	const auto a = train(init, ts, labels, tc);
	const auto b = train(init, ts, labels, tc);
	CHECK(a.weights == b.weights);
	CHECK(a.weights.conv[0].kernel != init.conv[0].kernel);
	CHECK(a.train_indices == b.train_indices);

	// Clusters never straddle the split, and every class is held out.
	std::set<std::string> tr, va;
	std::set<int> val_labels;
	for (auto i : a.train_indices)
		tr.insert(ts[i].spec.cluster_id);
	for (auto i : a.val_indices) {
		va.insert(ts[i].spec.cluster_id);
		val_labels.insert(labels[i]);
	}
	for (const auto& id : va)
		CHECK(tr.count(id) == 0);
	CHECK(val_labels.size() == 3);
	CHECK(a.train_indices.size() + a.val_indices.size() == ts.size());

	// Predicting the validation split reproduces the reported accuracy.
	std::vector<tiles::Tile> val_tiles;
	for (auto i : a.val_indices)
		val_tiles.push_back(ts[i]);
	const auto preds = predict_bins(a.weights, val_tiles, a.stats);
	int right = 0;
	for (std::size_t k = 0; k < preds.size(); ++k) {
		CHECK(std::abs(preds[k].probabilities.sum() - 1.0) <= 1e-9);
		right += preds[k].label == labels[a.val_indices[k]];
	}
	CHECK(static_cast<double>(right) / static_cast<double>(preds.size()) == a.val_accuracy);
	const auto preds2 = predict_bins(a.weights, val_tiles, a.stats);
	for (std::size_t k = 0; k < preds.size(); ++k)
		CHECK(preds2[k].probabilities == preds[k].probabilities);

	const auto csv = history_csv(a.history);
	CHECK(csv.rfind("epoch,phase,train_loss,val_accuracy\n1,1,", 0) == 0);
}

TEST_CASE("training errors")
{
	std::vector<tiles::Tile> ts;
	std::vector<int> labels;
	bin_dataset(6, 2, ts, labels);
	const auto init = build_network<float>(NetworkConfig::mini(), 3);
	TrainConfig tc;
	tc.epochs = 1;
	tc.phase1_epochs = 1;

	std::vector<int> two(labels.size(), 0);
	two[0] = 1;
	CHECK(convnet_error([&] { train(init, ts, two, tc); }) == ConvnetErrc::InsufficientClasses);

	auto hot = tc;
	hot.lr_phase1 = 1e30;
	hot.epochs = 3;
	hot.phase1_epochs = 3;
	CHECK(convnet_error([&] { train(init, ts, labels, hot); }) == ConvnetErrc::NonFiniteLoss);

	auto bad = tc;
	bad.phase1_epochs = 5;
	CHECK(convnet_error([&] { train(init, ts, labels, bad); }) == ConvnetErrc::InvalidConfig);
	bad = tc;
	bad.batch_size = 0;
	CHECK(convnet_error([&] { bad.validate(); }) == ConvnetErrc::InvalidConfig);
	CHECK(TrainConfig::from_json(tc.to_json()).to_json() == tc.to_json());
}

TEST_CASE("feature extraction")
{
	SplitMix64 rng(12);
	const auto w = build_network<float>(NetworkConfig::mini(), 6);
	std::vector<tiles::Tile> ts = {random_tile(rng, "F", 0), random_tile(rng, "F", 1)};
	ts.push_back(ts[0]);
	const auto stats = compute_norm_stats(ts);
	const auto f = extract_features(w, ts, stats);
	CHECK(f.rows() == 3);
	CHECK(f.cols() == 128);
	CHECK(f.minCoeff() >= 0.0);
	CHECK(f.row(0) == f.row(2));
	CHECK(f.row(0) != f.row(1));
}

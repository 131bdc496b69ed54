#include "terrapov/convnet.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <set>

namespace terrapov::convnet {

// ---------------------------------------------------------------------------
// NetworkConfig

NetworkConfig NetworkConfig::mini()
{
	return NetworkConfig{};
}

NetworkConfig NetworkConfig::vgg11()
{
	NetworkConfig c;
	c.preset = "vgg11";
	c.input_size = 224;
	c.conv_channels = {64, 128, 256, 256, 512, 512, 512, 512};
	c.pool_after = {1, 2, 4, 6, 8};
	c.fc_widths = {4096, 4096};
	return c;
}

NetworkConfig NetworkConfig::from_preset(const std::string& name)
{
	if (name == "mini")
		return mini();
	if (name == "vgg11")
		return vgg11();
	throw ConvnetError(ConvnetErrc::InvalidConfig, "unknown network preset '" + name + "'");
}

void NetworkConfig::validate() const
{
	auto bad = [](const std::string& msg) { throw ConvnetError(ConvnetErrc::InvalidConfig, "network config: " + msg); };
	if (input_size < 2)
		bad("input_size too small");
	if (conv_channels.empty())
		bad("no conv layers");
	if (in_channels != 3)
		bad("input must be RGB");
	for (std::size_t i = 0; i < conv_channels.size(); ++i) {
		if (conv_channels[i] < 1)
			bad("channel counts must be positive");
		if (i > 0 && conv_channels[i] < conv_channels[i - 1])
			bad("channel counts must be non-decreasing");
	}
	for (std::size_t i = 0; i < pool_after.size(); ++i) {
		if (pool_after[i] < 1 || pool_after[i] > static_cast<int>(conv_channels.size()))
			bad("pool index out of range");
		if (i > 0 && pool_after[i] <= pool_after[i - 1])
			bad("pool indices must be strictly increasing");
	}
	if (input_size % (1 << pool_after.size()) != 0)
		bad("input_size not divisible by the pooling factor");
	if (fc_widths[0] < 1 || fc_widths[1] < 1)
		bad("fc widths must be positive");
	if (n_classes < 2)
		bad("need at least two classes");
}

int NetworkConfig::final_side() const
{
	return input_size >> pool_after.size();
}

int NetworkConfig::flatten_size() const
{
	const int side = final_side();
	return conv_channels.back() * side * side;
}

nlohmann::json NetworkConfig::to_json() const
{
	return {{"preset", preset},         {"input_size", input_size}, {"conv_channels", conv_channels},
	        {"pool_after", pool_after}, {"fc_widths", fc_widths},   {"n_classes", n_classes},
	        {"in_channels", in_channels}};
}

NetworkConfig NetworkConfig::from_json(const nlohmann::json& j)
{
	NetworkConfig c = from_preset(j.value("preset", std::string("mini")));
	if (j.contains("input_size"))
		c.input_size = j.at("input_size").get<int>();
	if (j.contains("conv_channels"))
		c.conv_channels = j.at("conv_channels").get<std::vector<int>>();
	if (j.contains("pool_after"))
		c.pool_after = j.at("pool_after").get<std::vector<int>>();
	if (j.contains("fc_widths"))
		c.fc_widths = j.at("fc_widths").get<std::array<int, 2>>();
	if (j.contains("n_classes"))
		c.n_classes = j.at("n_classes").get<int>();
	c.validate();
	return c;
}

std::string NetworkConfig::digest() const
{
	return sha256_hex(to_json().dump());
}

// ---------------------------------------------------------------------------
// ModelWeights

template<typename Scalar>
ModelWeights<Scalar> ModelWeights<Scalar>::zeros_like() const
{
	ModelWeights z;
	z.config = config;
	z.init_seed = init_seed;
	for (const auto& c : conv)
		z.conv.push_back({Matrix<Scalar>::Zero(c.kernel.rows(), c.kernel.cols()), Vector<Scalar>::Zero(c.bias.size())});
	for (const auto& d : dense)
		z.dense.push_back({Matrix<Scalar>::Zero(d.weight.rows(), d.weight.cols()), Vector<Scalar>::Zero(d.bias.size())});
	return z;
}

template<typename Scalar>
bool ModelWeights<Scalar>::all_finite() const
{
	for (const auto& c : conv)
		if (!c.kernel.allFinite() || !c.bias.allFinite())
			return false;
	for (const auto& d : dense)
		if (!d.weight.allFinite() || !d.bias.allFinite())
			return false;
	return true;
}

template<typename Scalar>
bool ModelWeights<Scalar>::operator==(const ModelWeights& o) const
{
	if (!(config == o.config) || init_seed != o.init_seed || conv.size() != o.conv.size() || dense.size() != o.dense.size())
		return false;
	auto same = [](const auto& a, const auto& b) {
		return a.rows() == b.rows() && a.cols() == b.cols() && (a.array() == b.array()).all();
	};
	for (std::size_t i = 0; i < conv.size(); ++i)
		if (!same(conv[i].kernel, o.conv[i].kernel) || !same(conv[i].bias, o.conv[i].bias))
			return false;
	for (std::size_t i = 0; i < dense.size(); ++i)
		if (!same(dense[i].weight, o.dense[i].weight) || !same(dense[i].bias, o.dense[i].bias))
			return false;
	return true;
}

template<typename Scalar>
ModelWeights<Scalar> zero_network(const NetworkConfig& config)
{
	config.validate();
	ModelWeights<Scalar> w;
	w.config = config;
	int in = config.in_channels;
	for (int out : config.conv_channels) {
		w.conv.push_back({Matrix<Scalar>::Zero(out, 9 * in), Vector<Scalar>::Zero(out)});
		in = out;
	}
	const int widths[4] = {config.flatten_size(), config.fc_widths[0], config.fc_widths[1], config.n_classes};
	for (int i = 0; i < 3; ++i)
		w.dense.push_back({Matrix<Scalar>::Zero(widths[i + 1], widths[i]), Vector<Scalar>::Zero(widths[i + 1])});
	return w;
}

template<typename Scalar>
ModelWeights<Scalar> build_network(const NetworkConfig& config, std::uint64_t seed)
{
	ModelWeights<Scalar> w = zero_network<Scalar>(config);
	w.init_seed = seed;
	SplitMix64 rng(hash_seed(seed, {0x696e6974ULL}));
	auto he = [&rng](Matrix<Scalar>& m) {
		const double sd = std::sqrt(2.0 / static_cast<double>(m.cols()));
		for (Eigen::Index r = 0; r < m.rows(); ++r)
			for (Eigen::Index c = 0; c < m.cols(); ++c)
				m(r, c) = static_cast<Scalar>(rng.normal() * sd);
	};
	for (auto& c : w.conv)
		he(c.kernel);
	for (auto& d : w.dense)
		he(d.weight);
	return w;
}

// ---------------------------------------------------------------------------
// Data preparation

NormStats compute_norm_stats(std::span<const tiles::Tile> tiles, std::span<const std::size_t> indices)
{
	std::array<std::uint64_t, 3> sum{};
	std::array<unsigned __int128, 3> sumsq{};
	std::uint64_t n = 0;
	for (std::size_t idx : indices) {
		const auto& px = tiles[idx].pixels;
		for (std::size_t i = 0; i + 2 < px.size(); i += 3) {
			for (int c = 0; c < 3; ++c) {
				sum[c] += px[i + c];
				sumsq[c] += static_cast<std::uint64_t>(px[i + c]) * px[i + c];
			}
		}
		n += px.size() / 3;
	}
	NormStats s;
	if (n == 0)
		return s;
	for (int c = 0; c < 3; ++c) {
		s.mean[c] = (static_cast<double>(sum[c]) / static_cast<double>(n)) / 255.0;
		const unsigned __int128 num = static_cast<unsigned __int128>(n) * sumsq[c] -
		                              static_cast<unsigned __int128>(sum[c]) * sum[c];
		const double var = static_cast<double>(num) / (static_cast<double>(n) * static_cast<double>(n)) / (255.0 * 255.0);
		s.std[c] = var > 1e-16 ? std::sqrt(var) : 1.0;
	}
	return s;
}

NormStats compute_norm_stats(std::span<const tiles::Tile> tiles)
{
	std::vector<std::size_t> all(tiles.size());
	for (std::size_t i = 0; i < all.size(); ++i)
		all[i] = i;
	return compute_norm_stats(tiles, all);
}

nlohmann::json NormStats::to_json() const
{
	return {{"mean", mean}, {"std", std}};
}

NormStats NormStats::from_json(const nlohmann::json& j)
{
	NormStats s;
	s.mean = j.at("mean").get<std::array<double, 3>>();
	s.std = j.at("std").get<std::array<double, 3>>();
	return s;
}

template<typename Scalar>
Batch<Scalar> normalize_batch(std::span<const tiles::Tile> tiles, const NormStats& stats)
{
	Batch<Scalar> b;
	if (tiles.empty())
		return b;
	b.height = tiles.front().spec.height;
	b.width = tiles.front().spec.width;
	const Eigen::Index hw = static_cast<Eigen::Index>(b.height) * b.width;
	b.images.reserve(tiles.size());
	for (const auto& t : tiles) {
		if (t.spec.height != b.height || t.spec.width != b.width || t.pixels.size() != static_cast<std::size_t>(hw) * 3)
			throw ConvnetError(ConvnetErrc::InvalidConfig, "normalize_batch: tiles differ in size");
		Matrix<Scalar> img(3, hw);
		for (Eigen::Index p = 0; p < hw; ++p)
			for (int c = 0; c < 3; ++c)
				img(c, p) = static_cast<Scalar>((t.pixels[static_cast<std::size_t>(p * 3 + c)] / 255.0 - stats.mean[c]) / stats.std[c]);
		b.images.push_back(std::move(img));
	}
	return b;
}

template<typename Scalar>
void hflip(Matrix<Scalar>& image, int height, int width)
{
	for (int y = 0; y < height; ++y)
		for (int x = 0; x < width / 2; ++x)
			image.col(y * width + x).swap(image.col(y * width + (width - 1 - x)));
}

template<typename Scalar>
void vflip(Matrix<Scalar>& image, int height, int width)
{
	for (int y = 0; y < height / 2; ++y)
		for (int x = 0; x < width; ++x)
			image.col(y * width + x).swap(image.col((height - 1 - y) * width + x));
}

template<typename Scalar>
void augment_batch(Batch<Scalar>& batch, std::uint64_t seed, const AugmentFlags& flags)
{
	if (!flags.hflip && !flags.vflip)
		return;
	SplitMix64 rng(hash_seed(seed, {0x6175676dULL}));
	for (auto& img : batch.images) {
		// Both coins are always drawn so the pattern for one flag does not depend on the other.
		const bool h = rng.coin();
		const bool v = rng.coin();
		if (flags.hflip && h)
			hflip(img, batch.height, batch.width);
		if (flags.vflip && v)
			vflip(img, batch.height, batch.width);
	}
}

// ---------------------------------------------------------------------------
// Forward / backward

template<typename Scalar>
Matrix<Scalar> forward(const ModelWeights<Scalar>& w, const Batch<Scalar>& batch, ForwardCache<Scalar>* cache)
{
	const auto& cfg = w.config;
	const Eigen::Index n = static_cast<Eigen::Index>(batch.images.size());
	if (batch.height != cfg.input_size || batch.width != cfg.input_size)
		throw ConvnetError(ConvnetErrc::InvalidConfig, "forward: input is " + std::to_string(batch.width) + "x" +
		                                                   std::to_string(batch.height) + ", network expects " +
		                                                   std::to_string(cfg.input_size));
	std::vector<bool> pooled(w.conv.size(), false);
	for (int p : cfg.pool_after)
		pooled[static_cast<std::size_t>(p - 1)] = true;

	Matrix<Scalar> flat(cfg.flatten_size(), n);
	if (cache)
		cache->per_image.assign(static_cast<std::size_t>(n), {});
	Matrix<Scalar> col;
	for (Eigen::Index i = 0; i < n; ++i) {
		Matrix<Scalar> a = batch.images[static_cast<std::size_t>(i)];
		int h = batch.height, wd = batch.width;
		for (std::size_t l = 0; l < w.conv.size(); ++l) {
			Matrix<Scalar> z = conv_forward(w.conv[l], a, h, wd, col);
			relu_inplace(z);
			typename ForwardCache<Scalar>::ConvStep step{h, wd, {}, {}, pooled[l], {}};
			if (pooled[l]) {
				a = maxpool_forward(z, h, wd, step.argmax);
				h /= 2;
				wd /= 2;
			} else {
				a = z;
			}
			if (cache) {
				step.col = std::move(col);
				step.activation = std::move(z);
				cache->per_image[static_cast<std::size_t>(i)].push_back(std::move(step));
			}
		}
		flat.col(i) = Eigen::Map<const Vector<Scalar>>(a.data(), a.size());
	}

	Matrix<Scalar> h1 = dense_forward(w.dense[0], flat);
	relu_inplace(h1);
	Matrix<Scalar> h2 = dense_forward(w.dense[1], h1);
	relu_inplace(h2);
	Matrix<Scalar> logits = dense_forward(w.dense[2], h2);
	if (cache) {
		cache->flat = std::move(flat);
		cache->hidden1 = std::move(h1);
		cache->hidden2 = std::move(h2);
		cache->logits = logits;
	}
	return logits;
}

template<typename Scalar>
Scalar loss_and_gradient(const ModelWeights<Scalar>& w, const Batch<Scalar>& batch, const std::vector<int>& labels,
                         ModelWeights<Scalar>& grad, bool frozen_conv)
{
	ForwardCache<Scalar> cache;
	forward(w, batch, &cache);
	Matrix<Scalar> d;
	const Scalar loss = softmax_cross_entropy(cache.logits, labels, d);

	d = dense_backward(w.dense[2], cache.hidden2, d, grad.dense[2]);
	relu_backward_inplace(cache.hidden2, d);
	d = dense_backward(w.dense[1], cache.hidden1, d, grad.dense[1]);
	relu_backward_inplace(cache.hidden1, d);
	d = dense_backward(w.dense[0], cache.flat, d, grad.dense[0], !frozen_conv);
	if (frozen_conv)
		return loss;

	const int last_c = w.config.conv_channels.back();
	const int side = w.config.final_side();
	for (std::size_t i = 0; i < batch.images.size(); ++i) {
		Matrix<Scalar> da = Eigen::Map<const Matrix<Scalar>>(d.col(static_cast<Eigen::Index>(i)).data(), last_c,
		                                                      static_cast<Eigen::Index>(side) * side);
		auto& steps = cache.per_image[i];
		for (std::size_t l = w.conv.size(); l-- > 0;) {
			auto& s = steps[l];
			if (s.pooled)
				da = maxpool_backward(da, s.argmax, s.height, s.width);
			relu_backward_inplace(s.activation, da);
			da = conv_backward(w.conv[l], da, s.col, s.height, s.width, grad.conv[l], l > 0);
		}
	}
	return loss;
}

template<typename Scalar>
Scalar batch_loss(const ModelWeights<Scalar>& w, const Batch<Scalar>& batch, const std::vector<int>& labels)
{
	const Matrix<Scalar> logits = forward(w, batch);
	Matrix<Scalar> d;
	return softmax_cross_entropy(logits, labels, d);
}

template<typename Scalar>
void sgd_step(ModelWeights<Scalar>& w, ModelWeights<Scalar>& v, const ModelWeights<Scalar>& g, Scalar lr, Scalar mu,
              bool frozen_conv)
{
	auto step = [&](auto& param, auto& vel, const auto& grad) {
		vel = mu * vel - lr * grad;
		param += vel;
	};
	if (!frozen_conv) {
		for (std::size_t i = 0; i < w.conv.size(); ++i) {
			step(w.conv[i].kernel, v.conv[i].kernel, g.conv[i].kernel);
			step(w.conv[i].bias, v.conv[i].bias, g.conv[i].bias);
		}
	}
	for (std::size_t i = 0; i < w.dense.size(); ++i) {
		step(w.dense[i].weight, v.dense[i].weight, g.dense[i].weight);
		step(w.dense[i].bias, v.dense[i].bias, g.dense[i].bias);
	}
}

// ---------------------------------------------------------------------------
// Training

void TrainConfig::validate() const
{
	auto bad = [](const std::string& msg) { throw ConvnetError(ConvnetErrc::InvalidConfig, "train config: " + msg); };
	if (epochs < 0 || phase1_epochs < 0 || phase1_epochs > epochs)
		bad("need 0 <= phase1_epochs <= epochs");
	if (batch_size < 1)
		bad("batch_size must be >= 1");
	if (!(val_fraction >= 0.0 && val_fraction < 1.0))
		bad("val_fraction must lie in [0, 1)");
	if (!(lr_phase1 >= 0.0) || !(lr_phase2 >= 0.0) || !(momentum >= 0.0 && momentum < 1.0))
		bad("invalid learning rate or momentum");
}

nlohmann::json TrainConfig::to_json() const
{
	return {{"epochs", epochs},
	        {"phase1_epochs", phase1_epochs},
	        {"batch_size", batch_size},
	        {"lr_phase1", lr_phase1},
	        {"lr_phase2", lr_phase2},
	        {"momentum", momentum},
	        {"seed", seed},
	        {"augment", {{"hflip", augment.hflip}, {"vflip", augment.vflip}}},
	        {"val_fraction", val_fraction}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j)
{
	TrainConfig c;
	c.epochs = j.value("epochs", c.epochs);
	c.phase1_epochs = j.value("phase1_epochs", c.phase1_epochs);
	c.batch_size = j.value("batch_size", c.batch_size);
	c.lr_phase1 = j.value("lr_phase1", c.lr_phase1);
	c.lr_phase2 = j.value("lr_phase2", c.lr_phase2);
	c.momentum = j.value("momentum", c.momentum);
	c.seed = j.value("seed", c.seed);
	if (j.contains("augment")) {
		c.augment.hflip = j["augment"].value("hflip", c.augment.hflip);
		c.augment.vflip = j["augment"].value("vflip", c.augment.vflip);
	}
	c.val_fraction = j.value("val_fraction", c.val_fraction);
	c.validate();
	return c;
}

void stratified_split(std::span<const tiles::Tile> tiles, std::span<const int> labels, double val_fraction,
                      std::uint64_t seed, std::vector<std::size_t>& train, std::vector<std::size_t>& val)
{
	train.clear();
	val.clear();
	// group key -> member tile indices; tiles without a cluster id form singleton groups.
	std::map<std::string, std::vector<std::size_t>> groups;
	for (std::size_t i = 0; i < tiles.size(); ++i) {
		const auto& id = tiles[i].spec.cluster_id;
		groups[id.empty() ? "#" + std::to_string(i) : id].push_back(i);
	}
	std::map<int, std::vector<std::string>> by_label;
	for (const auto& [key, members] : groups)
		by_label[labels[members.front()]].push_back(key);

	std::set<std::string> held_out;
	for (auto& [label, keys] : by_label) {
		SplitMix64 rng(hash_seed(seed, {0x73706c74ULL, static_cast<std::uint64_t>(label)}));
		shuffle(keys, rng);
		std::size_t n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(keys.size())));
		if (val_fraction > 0.0 && n_val == 0 && keys.size() >= 2)
			n_val = 1;
		for (std::size_t k = 0; k < n_val && k < keys.size(); ++k)
			held_out.insert(keys[k]);
	}
	for (const auto& [key, members] : groups)
		for (std::size_t i : members)
			(held_out.count(key) ? val : train).push_back(i);
	std::sort(train.begin(), train.end());
	std::sort(val.begin(), val.end());
}

namespace {

Batch<float> gather(const Batch<float>& all, const std::vector<std::size_t>& idx, std::size_t begin, std::size_t end)
{
	Batch<float> b;
	b.height = all.height;
	b.width = all.width;
	for (std::size_t k = begin; k < end; ++k)
		b.images.push_back(all.images[idx[k]]);
	return b;
}

double accuracy(const ModelWeights<float>& w, const Batch<float>& all, const std::vector<std::size_t>& idx,
                std::span<const int> labels)
{
	if (idx.empty())
		return std::numeric_limits<double>::quiet_NaN();
	std::size_t correct = 0;
	for (std::size_t start = 0; start < idx.size(); start += 32) {
		const std::size_t end = std::min(idx.size(), start + 32);
		const Matrix<float> logits = forward(w, gather(all, idx, start, end));
		for (Eigen::Index j = 0; j < logits.cols(); ++j) {
			Eigen::Index arg;
			logits.col(j).maxCoeff(&arg);
			if (arg == labels[idx[start + static_cast<std::size_t>(j)]])
				++correct;
		}
	}
	return static_cast<double>(correct) / static_cast<double>(idx.size());
}

} // namespace

TrainResult train(const ModelWeights<float>& init, std::span<const tiles::Tile> tiles, std::span<const int> labels,
                  const TrainConfig& tc)
{
	tc.validate();
	init.config.validate();
	if (tiles.size() != labels.size())
		throw ConvnetError(ConvnetErrc::InvalidConfig, "train: tile and label counts differ");
	const int n_classes = init.config.n_classes;
	for (int l : labels)
		if (l < 0 || l >= n_classes)
			throw ConvnetError(ConvnetErrc::InvalidConfig, "train: label " + std::to_string(l) + " out of range");

	TrainResult res;
	stratified_split(tiles, labels, tc.val_fraction, tc.seed, res.train_indices, res.val_indices);
	std::set<int> present;
	for (std::size_t i : res.train_indices)
		present.insert(labels[i]);
	if (static_cast<int>(present.size()) < n_classes)
		throw ConvnetError(ConvnetErrc::InsufficientClasses, "train: training split has " + std::to_string(present.size()) +
		                                                         " of " + std::to_string(n_classes) + " classes");

	res.stats = compute_norm_stats(tiles, res.train_indices);
	const Batch<float> all = normalize_batch<float>(tiles, res.stats);

	ModelWeights<float> w = init;
	ModelWeights<float> velocity = w.zeros_like();
	ModelWeights<float> grad = w.zeros_like();
	const std::size_t bs = static_cast<std::size_t>(tc.batch_size);

	for (int epoch = 0; epoch < tc.epochs; ++epoch) {
		const bool phase1 = epoch < tc.phase1_epochs;
		const float lr = static_cast<float>(phase1 ? tc.lr_phase1 : tc.lr_phase2);
		std::vector<std::size_t> order = res.train_indices;
		SplitMix64 rng(hash_seed(tc.seed, {0x65706f63ULL, static_cast<std::uint64_t>(epoch)}));
		shuffle(order, rng);

		double loss_sum = 0.0;
		std::size_t b_index = 0;
		for (std::size_t start = 0; start < order.size(); start += bs, ++b_index) {
			const std::size_t end = std::min(order.size(), start + bs);
			Batch<float> batch = gather(all, order, start, end);
			augment_batch(batch, hash_seed(tc.seed, {static_cast<std::uint64_t>(epoch), b_index}), tc.augment);
			std::vector<int> y;
			for (std::size_t k = start; k < end; ++k)
				y.push_back(labels[order[k]]);

			grad = w.zeros_like();
			const float loss = loss_and_gradient(w, batch, y, grad, phase1);
			if (!std::isfinite(loss))
				throw ConvnetError(ConvnetErrc::NonFiniteLoss,
				                   "train: non-finite loss at epoch " + std::to_string(epoch + 1) + ", batch " +
				                       std::to_string(b_index) + " (lr " + format_double(lr) + ")");
			sgd_step(w, velocity, grad, lr, static_cast<float>(tc.momentum), phase1);
			loss_sum += static_cast<double>(loss) * static_cast<double>(end - start);
		}

		EpochRecord rec;
		rec.epoch = epoch + 1;
		rec.phase = phase1 ? 1 : 2;
		rec.train_loss = order.empty() ? 0.0 : loss_sum / static_cast<double>(order.size());
		rec.val_accuracy = accuracy(w, all, res.val_indices, labels);
		res.history.push_back(rec);
	}

	res.val_accuracy = accuracy(w, all, res.val_indices, labels);
	res.train_accuracy = accuracy(w, all, res.train_indices, labels);
	res.weights = std::move(w);
	return res;
}

std::string history_csv(const std::vector<EpochRecord>& history)
{
	std::string out = "epoch,phase,train_loss,val_accuracy\n";
	for (const auto& r : history)
		out += std::to_string(r.epoch) + "," + std::to_string(r.phase) + "," + format_double(r.train_loss) + "," +
		       format_double(r.val_accuracy) + "\n";
	return out;
}

std::vector<Prediction> predict_bins(const ModelWeights<float>& w, std::span<const tiles::Tile> tiles,
                                     const NormStats& stats)
{
	std::vector<Prediction> out;
	out.reserve(tiles.size());
	for (std::size_t start = 0; start < tiles.size(); start += 32) {
		const std::size_t end = std::min(tiles.size(), start + 32);
		const Batch<float> b = normalize_batch<float>(tiles.subspan(start, end - start), stats);
		const Eigen::MatrixXd logits = forward(w, b).cast<double>();
		const Eigen::MatrixXd p = softmax<double>(logits);
		for (Eigen::Index j = 0; j < p.cols(); ++j) {
			Prediction pr;
			pr.probabilities = p.col(j);
			Eigen::Index arg = 0;
			for (Eigen::Index k = 1; k < p.rows(); ++k)
				if (p(k, j) > p(arg, j))
					arg = k;
			pr.label = static_cast<int>(arg);
			out.push_back(std::move(pr));
		}
	}
	return out;
}

Eigen::MatrixXd extract_features(const ModelWeights<float>& w, std::span<const tiles::Tile> tiles, const NormStats& stats)
{
	Eigen::MatrixXd out(static_cast<Eigen::Index>(tiles.size()), w.config.fc_widths[0]);
	for (std::size_t start = 0; start < tiles.size(); start += 32) {
		const std::size_t end = std::min(tiles.size(), start + 32);
		const Batch<float> b = normalize_batch<float>(tiles.subspan(start, end - start), stats);
		ForwardCache<float> cache;
		forward(w, b, &cache);
		out.middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(end - start)) =
			cache.hidden1.transpose().cast<double>();
	}
	return out;
}

// ---------------------------------------------------------------------------

#define TERRAPOV_INSTANTIATE(S)                                                                                        \
	template struct ModelWeights<S>;                                                                                   \
	template ModelWeights<S> build_network<S>(const NetworkConfig&, std::uint64_t);                                    \
	template ModelWeights<S> zero_network<S>(const NetworkConfig&);                                                    \
	template Batch<S> normalize_batch<S>(std::span<const tiles::Tile>, const NormStats&);                              \
	template void augment_batch<S>(Batch<S>&, std::uint64_t, const AugmentFlags&);                                     \
	template void hflip<S>(Matrix<S>&, int, int);                                                                      \
	template void vflip<S>(Matrix<S>&, int, int);                                                                      \
	template Matrix<S> forward<S>(const ModelWeights<S>&, const Batch<S>&, ForwardCache<S>*);                          \
	template S loss_and_gradient<S>(const ModelWeights<S>&, const Batch<S>&, const std::vector<int>&, ModelWeights<S>&, \
	                                bool);                                                                             \
	template S batch_loss<S>(const ModelWeights<S>&, const Batch<S>&, const std::vector<int>&);                        \
	template void sgd_step<S>(ModelWeights<S>&, ModelWeights<S>&, const ModelWeights<S>&, S, S, bool);

TERRAPOV_INSTANTIATE(float)
TERRAPOV_INSTANTIATE(double)

#undef TERRAPOV_INSTANTIATE

} // namespace terrapov::convnet

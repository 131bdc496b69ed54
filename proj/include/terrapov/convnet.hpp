#pragma once

#include "terrapov/common.hpp"
#include "terrapov/convnet_layers.hpp"
#include "terrapov/tiles.hpp"

#include <json.hpp>

#include <array>
#include <span>
#include <string>
#include <vector>

namespace terrapov::convnet {

enum class ConvnetErrc
{
	InvalidConfig,
	InsufficientClasses,
	NonFiniteLoss,
	BadMagic,
	ConfigMismatch,
	Truncated,
};

using ConvnetError = CodedError<ConvnetErrc>;

/// VGG-style architecture: 3x3 convolutions with ReLU, 2x2 max-pools after
/// selected layers, then FC(d) - ReLU - FC(d) - ReLU - FC(n_classes).
struct NetworkConfig
{
	std::string preset = "mini";
	int input_size = 64;
	std::vector<int> conv_channels = {16, 32, 64};
	/// 1-based conv layer indices followed by a max-pool.
	std::vector<int> pool_after = {1, 2, 3};
	std::array<int, 2> fc_widths = {128, 128};
	int n_classes = 3;
	int in_channels = 3;

	static NetworkConfig mini();
	static NetworkConfig vgg11();
	static NetworkConfig from_preset(const std::string& name);

	void validate() const;
	/// Spatial side length after the conv stack.
	int final_side() const;
	int flatten_size() const;

	nlohmann::json to_json() const;
	static NetworkConfig from_json(const nlohmann::json& j);
	/// SHA-256 over the canonical JSON form.
	std::string digest() const;

	bool operator==(const NetworkConfig&) const = default;
};

template<typename Scalar>
struct ModelWeights
{
	NetworkConfig config;
	std::uint64_t init_seed = 0;
	std::vector<ConvLayer<Scalar>> conv;
	/// fc1, fc2, output.
	std::vector<DenseLayer<Scalar>> dense;

	/// Same shapes, all zeros (used for gradients and momentum buffers).
	ModelWeights zeros_like() const;

	template<typename Other>
	ModelWeights<Other> cast() const
	{
		ModelWeights<Other> w;
		w.config = config;
		w.init_seed = init_seed;
		for (const auto& c : conv)
			w.conv.push_back({c.kernel.template cast<Other>(), c.bias.template cast<Other>()});
		for (const auto& d : dense)
			w.dense.push_back({d.weight.template cast<Other>(), d.bias.template cast<Other>()});
		return w;
	}

	bool all_finite() const;
	bool operator==(const ModelWeights& o) const;

	/// Logical shape (out, in, 3, 3) of conv layer i.
	std::array<int, 4> conv_shape(std::size_t i) const
	{
		return {conv[i].out_channels(), conv[i].in_channels(), 3, 3};
	}
};

/// He-normal initialization (variance 2 / fan_in), zero biases.
template<typename Scalar>
ModelWeights<Scalar> build_network(const NetworkConfig& config, std::uint64_t seed);

/// Correctly shaped, all-zero parameters.
template<typename Scalar>
ModelWeights<Scalar> zero_network(const NetworkConfig& config);

struct AugmentFlags
{
	bool hflip = true;
	bool vflip = true;
};

struct TrainConfig
{
	int epochs = 20;
	int phase1_epochs = 10;
	int batch_size = 8;
	double lr_phase1 = 0.001;
	double lr_phase2 = 0.001;
	double momentum = 0.9;
	std::uint64_t seed = 0;
	AugmentFlags augment;
	double val_fraction = 0.2;

	void validate() const;
	nlohmann::json to_json() const;
	static TrainConfig from_json(const nlohmann::json& j);
};

/// Per-channel statistics of value / 255 over the training split.
struct NormStats
{
	std::array<double, 3> mean{0.0, 0.0, 0.0};
	std::array<double, 3> std{1.0, 1.0, 1.0};

	nlohmann::json to_json() const;
	static NormStats from_json(const nlohmann::json& j);
};

/// Computed from exact integer sums; a channel with zero spread gets std 1.
NormStats compute_norm_stats(std::span<const tiles::Tile> tiles, std::span<const std::size_t> indices);
NormStats compute_norm_stats(std::span<const tiles::Tile> tiles);

template<typename Scalar>
struct Batch
{
	int height = 0;
	int width = 0;
	/// Each image is channels x (height * width).
	std::vector<Matrix<Scalar>> images;
};

template<typename Scalar>
Batch<Scalar> normalize_batch(std::span<const tiles::Tile> tiles, const NormStats& stats);

/// Independent per-image horizontal and vertical flips with p = 0.5 each.
template<typename Scalar>
void augment_batch(Batch<Scalar>& batch, std::uint64_t seed, const AugmentFlags& flags);

template<typename Scalar>
void hflip(Matrix<Scalar>& image, int height, int width);
template<typename Scalar>
void vflip(Matrix<Scalar>& image, int height, int width);

/// Intermediate values kept for backpropagation.
template<typename Scalar>
struct ForwardCache
{
	struct ConvStep
	{
		int height, width;
		Matrix<Scalar> col;
		Matrix<Scalar> activation; // post-ReLU
		bool pooled = false;
		Eigen::MatrixXi argmax;
	};
	std::vector<std::vector<ConvStep>> per_image;
	Matrix<Scalar> flat;    // flatten_size x batch
	Matrix<Scalar> hidden1; // post-ReLU
	Matrix<Scalar> hidden2; // post-ReLU
	Matrix<Scalar> logits;
};

/// Runs the network; fills `cache` when non-null.
template<typename Scalar>
Matrix<Scalar> forward(const ModelWeights<Scalar>& w, const Batch<Scalar>& batch, ForwardCache<Scalar>* cache = nullptr);

/// Loss and gradient for one labelled batch. With `frozen_conv` the conv
/// gradients are left at zero and the conv backward pass is skipped.
template<typename Scalar>
Scalar loss_and_gradient(const ModelWeights<Scalar>& w, const Batch<Scalar>& batch, const std::vector<int>& labels,
                         ModelWeights<Scalar>& grad, bool frozen_conv = false);

template<typename Scalar>
Scalar batch_loss(const ModelWeights<Scalar>& w, const Batch<Scalar>& batch, const std::vector<int>& labels);

/// One SGD-with-momentum step: v = mu * v - lr * g; w += v.
template<typename Scalar>
void sgd_step(ModelWeights<Scalar>& w, ModelWeights<Scalar>& velocity, const ModelWeights<Scalar>& grad, Scalar lr,
              Scalar momentum, bool frozen_conv);

struct EpochRecord
{
	int epoch = 0;
	int phase = 1;
	double train_loss = 0.0;
	/// NaN when there is no validation split.
	double val_accuracy = 0.0;
};

struct TrainResult
{
	ModelWeights<float> weights;
	std::vector<EpochRecord> history;
	NormStats stats;
	std::vector<std::size_t> train_indices;
	std::vector<std::size_t> val_indices;
	double val_accuracy = 0.0;
	double train_accuracy = 0.0;
};

/// Stratified split by label over groups (tile cluster ids), so every tile
/// of a cluster lands on the same side.
void stratified_split(std::span<const tiles::Tile> tiles, std::span<const int> labels, double val_fraction,
                      std::uint64_t seed, std::vector<std::size_t>& train, std::vector<std::size_t>& val);

/// Two-phase training: phase 1 updates the FC head with the conv stack frozen,
/// phase 2 updates everything.
TrainResult train(const ModelWeights<float>& init, std::span<const tiles::Tile> tiles, std::span<const int> labels,
                  const TrainConfig& config);

std::string history_csv(const std::vector<EpochRecord>& history);

struct Prediction
{
	int label = 0;
	Eigen::VectorXd probabilities;
};

std::vector<Prediction> predict_bins(const ModelWeights<float>& w, std::span<const tiles::Tile> tiles,
                                     const NormStats& stats);

/// Activations after FC1 + ReLU, one row per tile.
Eigen::MatrixXd extract_features(const ModelWeights<float>& w, std::span<const tiles::Tile> tiles, const NormStats& stats);

/// "TPW1" binary format, little-endian float32 payload.
Bytes save_weights(const ModelWeights<float>& w);
ModelWeights<float> load_weights(std::span<const std::uint8_t> bytes, const NetworkConfig& expected);

} // namespace terrapov::convnet

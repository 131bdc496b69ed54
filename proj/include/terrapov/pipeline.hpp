#pragma once

#include "terrapov/common.hpp"
#include "terrapov/convnet.hpp"
#include "terrapov/regress.hpp"
#include "terrapov/tiles.hpp"

#include <json.hpp>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace terrapov::pipeline {

inline constexpr const char* kToolVersion = "terrapov 0.1.0";

enum class PipelineErrc
{
	Validation,
	Locked,
};

using PipelineError = CodedError<PipelineErrc>;

/// A failure inside a stage, tagged with the stage name.
class StageError : public Error
{
public:
	StageError(std::string stage, const std::string& what)
		: Error("stage '" + stage + "' failed: " + what)
		, stage_(std::move(stage))
	{}
	const std::string& stage() const noexcept { return stage_; }

private:
	std::string stage_;
};

enum class Stage
{
	Ingest,
	Bin,
	Tiles,
	Train,
	Features,
	Regress,
	Reports,
};

const char* stage_name(Stage s);
Stage stage_from_name(const std::string& name);

/// Either a single raster or an earlier/later pair whose difference is used.
struct CovariateSource
{
	std::string name;
	std::filesystem::path raster;
	std::filesystem::path earlier;
	std::filesystem::path later;

	bool is_delta() const { return raster.empty(); }
	std::vector<std::filesystem::path> files() const;
};

struct ProviderSettings
{
	/// "synthetic", "cache" or "http".
	std::string kind = "synthetic";
	/// Synthetic: raster sampled at each tile center for the temperature latent.
	std::filesystem::path latent_raster;
	double greenness = 0.15;
	double noise_sigma = 12.0;
	std::string url_template;
	std::string id;
	int timeout_seconds = 30;
	int max_in_flight = 4;
	tiles::TileShape shape;
};

struct PipelineConfig
{
	std::filesystem::path households;
	std::vector<CovariateSource> covariates;
	/// Which entry of `covariates` drives binning.
	std::string covariate;
	std::filesystem::path tile_cache_dir;
	std::filesystem::path output_dir;
	std::optional<std::filesystem::path> zones;
	std::optional<std::filesystem::path> pretrained_weights;
	double half_extent_km = 5.0;
	int n_bins = 3;
	int tiles_per_side = 3;
	ProviderSettings provider;
	convnet::NetworkConfig network;
	convnet::TrainConfig train;
	regress::CvConfig cv;
	regress::TargetTransform target_transform = regress::TargetTransform::Raw;
	/// Seeds every stage (GMM, tiles, initialization, training, folds).
	std::uint64_t seed = 0;

	/// Relative paths resolve against `base_dir`. Unknown keys are rejected.
	static PipelineConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir);
	static PipelineConfig load(const std::filesystem::path& path);
	nlohmann::json to_json() const;

	/// SHA-256 of the canonical JSON without any path strings.
	std::string digest() const;

	/// Throws PipelineError(Validation) listing every problem found.
	void validate() const;

	const CovariateSource& active_covariate() const;
};

struct StageRecord
{
	Stage stage;
	std::string key;
	std::string output_digest;
	double wall_seconds = 0.0;
	bool cache_hit = false;
};

struct Metrics
{
	double bin_accuracy = 0.0;
	double train_accuracy = 0.0;
	double best_alpha = 0.0;
	double pooled_r2 = 0.0;
	double mean_mse = 0.0;
	std::vector<double> per_fold_mse;
	std::vector<double> per_fold_r2;
};

struct RunManifest
{
	std::string config_digest;
	std::vector<std::pair<std::string, std::string>> input_digests;
	std::vector<StageRecord> stages;
	std::optional<Metrics> metrics;
	/// Canonical document written to manifest.json (no timings or cache flags).
	nlohmann::json document;
};

struct RunOptions
{
	/// Stop after this stage; the manifest is still written.
	std::optional<Stage> until;
	/// Progress lines; null for silence.
	std::ostream* log = nullptr;
};

/// Runs the stages in order with per-stage caching under
/// <output_dir>/stages/<stage>/<key>/ and writes manifest.json last.
RunManifest run(const PipelineConfig& config, const RunOptions& options = {});

struct ComparisonRow
{
	std::string covariate;
	double bin_accuracy = 0.0;
	double best_alpha = 0.0;
	double pooled_r2 = 0.0;
};

/// One full run per covariate into <output_dir>/compare/<name>/ with shared
/// seed and survey data; writes <output_dir>/comparison.csv.
std::vector<ComparisonRow> compare_covariates(const PipelineConfig& config, const std::vector<CovariateSource>& covariates,
                                              const RunOptions& options = {});

std::string comparison_csv(const std::vector<ComparisonRow>& rows);

/// Config for the generated synthetic world in `data_dir` (see synthetic_world.hpp).
nlohmann::json synthetic_config_json(std::uint64_t seed);

} // namespace terrapov::pipeline

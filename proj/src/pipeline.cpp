#include "terrapov/pipeline.hpp"

#include "terrapov/binning.hpp"
#include "terrapov/csv.hpp"
#include "terrapov/raster.hpp"
#include "terrapov/reports.hpp"
#include "terrapov/survey.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <map>
#include <memory>
#include <ostream>
#include <set>

namespace terrapov::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

[[noreturn]] void invalid(const std::string& msg)
{
	throw PipelineError(PipelineErrc::Validation, msg);
}

fs::path resolve(const fs::path& base, const std::string& p)
{
	if (p.empty())
		return {};
	const fs::path path(p);
	return path.is_absolute() ? path.lexically_normal() : (base / path).lexically_normal();
}

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where)
{
	if (!j.is_object())
		invalid(where + " must be a JSON object");
	for (const auto& [k, v] : j.items())
		if (!allowed.count(k))
			invalid(where + ": unknown key '" + k + "'");
}

json number_or_null(double v)
{
	return std::isfinite(v) ? json(v) : json(nullptr);
}

double number_or_nan(const json& j)
{
	return j.is_null() ? std::nan("") : j.get<double>();
}

} // namespace

const char* stage_name(Stage s)
{
	switch (s) {
	case Stage::Ingest: return "ingest";
	case Stage::Bin: return "bin";
	case Stage::Tiles: return "tiles";
	case Stage::Train: return "train";
	case Stage::Features: return "features";
	case Stage::Regress: return "regress";
	case Stage::Reports: return "reports";
	}
	return "?";
}

Stage stage_from_name(const std::string& name)
{
	for (Stage s : {Stage::Ingest, Stage::Bin, Stage::Tiles, Stage::Train, Stage::Features, Stage::Regress, Stage::Reports})
		if (name == stage_name(s))
			return s;
	invalid("unknown stage '" + name + "'");
}

std::vector<fs::path> CovariateSource::files() const
{
	if (is_delta())
		return {earlier, later};
	return {raster};
}

// ---------------------------------------------------------------------------
// Config

PipelineConfig PipelineConfig::from_json(const json& j, const fs::path& base_dir)
{
	PipelineConfig c;
	try {
		check_keys(j,
		           {"households", "covariates", "covariate", "tile_cache_dir", "output_dir", "zones", "pretrained_weights",
		            "half_extent_km", "n_bins", "tiles_per_side", "provider", "network", "train", "cv", "target_transform",
		            "seed"},
		           "config");
		c.households = resolve(base_dir, j.value("households", std::string()));
		for (const auto& cj : j.value("covariates", json::array())) {
			check_keys(cj, {"name", "raster", "earlier", "later"}, "covariate entry");
			CovariateSource s;
			s.name = cj.value("name", std::string());
			s.raster = resolve(base_dir, cj.value("raster", std::string()));
			s.earlier = resolve(base_dir, cj.value("earlier", std::string()));
			s.later = resolve(base_dir, cj.value("later", std::string()));
			if (s.raster.empty() == (s.earlier.empty() || s.later.empty()))
				invalid("covariate '" + s.name + "' needs either 'raster' or both 'earlier' and 'later'");
			c.covariates.push_back(s);
		}
		c.covariate = j.value("covariate", c.covariates.empty() ? std::string() : c.covariates.front().name);
		c.tile_cache_dir = resolve(base_dir, j.value("tile_cache_dir", std::string()));
		c.output_dir = resolve(base_dir, j.value("output_dir", std::string()));
		if (j.contains("zones") && !j["zones"].is_null())
			c.zones = resolve(base_dir, j["zones"].get<std::string>());
		if (j.contains("pretrained_weights") && !j["pretrained_weights"].is_null())
			c.pretrained_weights = resolve(base_dir, j["pretrained_weights"].get<std::string>());
		c.half_extent_km = j.value("half_extent_km", c.half_extent_km);
		c.n_bins = j.value("n_bins", c.n_bins);
		c.tiles_per_side = j.value("tiles_per_side", c.tiles_per_side);
		c.seed = j.value("seed", c.seed);

		if (j.contains("provider")) {
			const auto& p = j["provider"];
			check_keys(p,
			           {"kind", "latent_raster", "greenness", "noise_sigma", "url_template", "id", "timeout_seconds",
			            "max_in_flight", "zoom", "width", "height"},
			           "provider");
			auto& s = c.provider;
			s.kind = p.value("kind", s.kind);
			s.latent_raster = resolve(base_dir, p.value("latent_raster", std::string()));
			s.greenness = p.value("greenness", s.greenness);
			s.noise_sigma = p.value("noise_sigma", s.noise_sigma);
			s.url_template = p.value("url_template", s.url_template);
			s.id = p.value("id", s.id);
			s.timeout_seconds = p.value("timeout_seconds", s.timeout_seconds);
			s.max_in_flight = p.value("max_in_flight", s.max_in_flight);
			s.shape.zoom = p.value("zoom", s.shape.zoom);
			s.shape.width = p.value("width", s.shape.width);
			s.shape.height = p.value("height", s.shape.height);
		}
		for (const char* section : {"train", "cv"})
			if (j.contains(section) && j[section].contains("seed"))
				invalid(std::string(section) + ".seed is not accepted; the top-level seed drives every stage");
		c.network = convnet::NetworkConfig::from_json(j.value("network", json::object()));
		c.network.n_classes = c.n_bins;
		c.train = convnet::TrainConfig::from_json(j.value("train", json::object()));
		c.train.seed = c.seed;
		c.cv = regress::CvConfig::from_json(j.value("cv", json::object()));
		c.cv.seed = c.seed;
		c.target_transform = regress::transform_from_string(j.value("target_transform", std::string("raw")));
	} catch (const PipelineError&) {
		throw;
	} catch (const std::exception& e) {
		invalid(std::string("config: ") + e.what());
	}
	return c;
}

PipelineConfig PipelineConfig::load(const fs::path& path)
{
	json j;
	try {
		j = json::parse(read_text(path));
	} catch (const std::exception& e) {
		invalid("cannot read config " + path.string() + ": " + e.what());
	}
	return from_json(j, fs::absolute(path).parent_path());
}

namespace {

json config_json(const PipelineConfig& c, bool with_paths)
{
	auto path = [&](const fs::path& p) { return with_paths ? json(p.generic_string()) : json(nullptr); };
	json covs = json::array();
	for (const auto& s : c.covariates) {
		json e = {{"name", s.name}};
		if (with_paths) {
			if (s.is_delta()) {
				e["earlier"] = s.earlier.generic_string();
				e["later"] = s.later.generic_string();
			} else {
				e["raster"] = s.raster.generic_string();
			}
		} else {
			e["delta"] = s.is_delta();
		}
		covs.push_back(e);
	}
	json j = {
	    {"covariates", covs},
	    {"covariate", c.covariate},
	    {"half_extent_km", c.half_extent_km},
	    {"n_bins", c.n_bins},
	    {"tiles_per_side", c.tiles_per_side},
	    {"network", c.network.to_json()},
	    {"cv", {{"k", c.cv.k}, {"alpha_grid", c.cv.alpha_grid}}},
	    {"target_transform", regress::to_string(c.target_transform)},
	    {"seed", c.seed},
	};
	json t = c.train.to_json();
	t.erase("seed");
	j["train"] = t;
	j["provider"] = {{"kind", c.provider.kind},
	                 {"greenness", c.provider.greenness},
	                 {"noise_sigma", c.provider.noise_sigma},
	                 {"url_template", c.provider.url_template},
	                 {"id", c.provider.id},
	                 {"timeout_seconds", c.provider.timeout_seconds},
	                 {"max_in_flight", c.provider.max_in_flight},
	                 {"zoom", c.provider.shape.zoom},
	                 {"width", c.provider.shape.width},
	                 {"height", c.provider.shape.height}};
	if (with_paths) {
		j["households"] = path(c.households);
		j["tile_cache_dir"] = path(c.tile_cache_dir);
		j["output_dir"] = path(c.output_dir);
		j["zones"] = c.zones ? path(*c.zones) : json(nullptr);
		j["pretrained_weights"] = c.pretrained_weights ? path(*c.pretrained_weights) : json(nullptr);
		j["provider"]["latent_raster"] = path(c.provider.latent_raster);
	}
	return j;
}

} // namespace

json PipelineConfig::to_json() const
{
	return config_json(*this, true);
}

std::string PipelineConfig::digest() const
{
	return sha256_hex(config_json(*this, false).dump());
}

const CovariateSource& PipelineConfig::active_covariate() const
{
	for (const auto& s : covariates)
		if (s.name == covariate)
			return s;
	invalid("covariate '" + covariate + "' is not listed in 'covariates'");
}

void PipelineConfig::validate() const
{
	std::vector<std::string> problems;
	auto need_file = [&](const fs::path& p, const std::string& what) {
		if (p.empty())
			problems.push_back(what + " path is missing");
		else if (!fs::is_regular_file(p))
			problems.push_back(what + " not found: " + p.string());
	};
	need_file(households, "households CSV");
	if (covariates.empty())
		problems.push_back("no covariate rasters configured");
	std::set<std::string> names;
	for (const auto& s : covariates) {
		if (s.name.empty())
			problems.push_back("covariate with empty name");
		if (!names.insert(s.name).second)
			problems.push_back("duplicate covariate name '" + s.name + "'");
		for (const auto& f : s.files())
			need_file(f, "covariate '" + s.name + "' raster");
	}
	if (!covariates.empty() && !names.count(covariate))
		problems.push_back("covariate '" + covariate + "' is not listed in 'covariates'");
	if (output_dir.empty())
		problems.push_back("output_dir is missing");
	if (zones)
		need_file(*zones, "zone table");
	if (pretrained_weights)
		need_file(*pretrained_weights, "pretrained weights");
	if (!(half_extent_km > 0.0))
		problems.push_back("half_extent_km must be positive");
	if (n_bins < 2)
		problems.push_back("n_bins must be at least 2");
	if (tiles_per_side < 1)
		problems.push_back("tiles_per_side must be at least 1");

	const auto& p = provider;
	if (p.kind == "synthetic") {
		need_file(p.latent_raster, "provider latent raster");
		if (!(p.greenness >= 0.0 && p.greenness <= 1.0))
			problems.push_back("provider greenness must lie in [0, 1]");
		if (!(p.noise_sigma >= 0.0))
			problems.push_back("provider noise_sigma must be >= 0");
	} else if (p.kind == "http") {
		if (p.url_template.rfind("http://", 0) != 0)
			problems.push_back("provider url_template must start with http://");
		if (tile_cache_dir.empty())
			problems.push_back("http provider needs tile_cache_dir");
	} else if (p.kind == "cache") {
		if (tile_cache_dir.empty())
			problems.push_back("cache provider needs tile_cache_dir");
	} else {
		problems.push_back("provider kind must be synthetic, cache or http");
	}
	try {
		tiles::TileSpec spec;
		spec.zoom = p.shape.zoom;
		spec.width = p.shape.width;
		spec.height = p.shape.height;
		tiles::validate(spec);
	} catch (const std::exception& e) {
		problems.push_back(e.what());
	}
	if (p.shape.width != network.input_size || p.shape.height != network.input_size)
		problems.push_back("tile size " + std::to_string(p.shape.width) + "x" + std::to_string(p.shape.height) +
		                   " does not match network input " + std::to_string(network.input_size));
	try {
		network.validate();
		train.validate();
		cv.validate();
	} catch (const std::exception& e) {
		problems.push_back(e.what());
	}
	if (problems.empty())
		return;
	std::string msg = "invalid config:";
	for (const auto& s : problems)
		msg += "\n  - " + s;
	invalid(msg);
}

// ---------------------------------------------------------------------------
// Run

namespace {

class DirLock
{
public:
	explicit DirLock(const fs::path& dir)
		: path_(dir / ".terrapov.lock")
	{
		const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
		if (fd < 0)
			throw PipelineError(PipelineErrc::Locked, "output directory is locked (" + path_.string() +
			                                              "); delete the file if no other run is active");
		const std::string pid = std::to_string(::getpid()) + "\n";
		[[maybe_unused]] auto n = ::write(fd, pid.data(), pid.size());
		::close(fd);
	}
	~DirLock()
	{
		std::error_code ec;
		fs::remove(path_, ec);
	}
	DirLock(const DirLock&) = delete;
	DirLock& operator=(const DirLock&) = delete;

private:
	fs::path path_;
};

std::string file_digest(const fs::path& p)
{
	return sha256_hex(read_file(p));
}

// Digest over every file below `dir` except the completion marker.
std::string dir_digest(const fs::path& dir)
{
	std::vector<std::pair<std::string, fs::path>> files;
	for (const auto& e : fs::recursive_directory_iterator(dir))
		if (e.is_regular_file() && e.path().filename() != "done.json")
			files.emplace_back(fs::relative(e.path(), dir).generic_string(), e.path());
	std::sort(files.begin(), files.end());
	std::string listing;
	for (const auto& [rel, p] : files)
		listing += rel + " " + file_digest(p) + "\n";
	return sha256_hex(listing);
}

raster::RasterGrid load_covariate(const CovariateSource& s)
{
	if (s.is_delta())
		return raster::delta_grid(raster::load_geotiff(s.earlier), raster::load_geotiff(s.later));
	return raster::load_geotiff(s.raster);
}

struct Context
{
	const PipelineConfig& config;
	const RunOptions& options;
	fs::path stages_root;
	RunManifest manifest;
	std::map<std::string, std::string> inputs;
};

template<typename Compute>
StageRecord run_stage(Context& ctx, Stage stage, json key_doc, Compute compute)
{
	const auto t0 = std::chrono::steady_clock::now();
	key_doc["stage"] = stage_name(stage);
	key_doc["tool_version"] = kToolVersion;
	StageRecord rec;
	rec.stage = stage;
	rec.key = sha256_hex(key_doc.dump());
	const fs::path dir = ctx.stages_root / stage_name(stage) / rec.key.substr(0, 24);
	const fs::path marker = dir / "done.json";

	try {
		if (fs::is_regular_file(marker)) {
			const json m = json::parse(read_text(marker));
			const std::string d = dir_digest(dir);
			if (m.value("output_digest", std::string()) == d && m.value("key", std::string()) == rec.key) {
				rec.cache_hit = true;
				rec.output_digest = d;
			}
		}
		if (!rec.cache_hit) {
			fs::remove_all(dir);
			fs::create_directories(dir);
			compute(dir);
			rec.output_digest = dir_digest(dir);
			write_file_atomic(marker, json{{"key", rec.key}, {"output_digest", rec.output_digest}}.dump(2) + "\n");
		}
	} catch (const StageError&) {
		throw;
	} catch (const std::exception& e) {
		throw StageError(stage_name(stage), e.what());
	}
	rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
	if (ctx.options.log) {
		char buf[64];
		std::snprintf(buf, sizeof(buf), " (%.2f s)", rec.wall_seconds);
		*ctx.options.log << "[" << stage_name(stage) << "] " << (rec.cache_hit ? "cached" : "done") << buf << "\n";
	}
	ctx.manifest.stages.push_back(rec);
	return rec;
}

fs::path stage_dir(const Context& ctx, const StageRecord& rec)
{
	return ctx.stages_root / stage_name(rec.stage) / rec.key.substr(0, 24);
}

// Loads a stage's outputs, turning failures into a StageError for that stage.
template<typename F>
auto load_stage(const StageRecord& rec, F f)
{
	try {
		return f();
	} catch (const std::exception& e) {
		throw StageError(stage_name(rec.stage), std::string("cannot read cached output: ") + e.what());
	}
}

tiles::ProviderConfig provider_config(const PipelineConfig& c, const std::map<std::string, std::string>& inputs)
{
	tiles::ProviderConfig p;
	p.cache_dir = c.tile_cache_dir;
	p.seed = c.seed;
	p.timeout_seconds = c.provider.timeout_seconds;
	p.max_in_flight = c.provider.max_in_flight;
	p.provider_id = c.provider.id;
	if (c.provider.kind == "synthetic") {
		p.kind = tiles::ProviderKind::Synthetic;
		auto grid = std::make_shared<raster::RasterGrid>(raster::load_geotiff(c.provider.latent_raster));
		const double green = c.provider.greenness, sigma = c.provider.noise_sigma;
		p.latent = [grid, green, sigma](const tiles::TileSpec& s) {
			return tiles::SceneLatent{raster::sample_at(*grid, s.lat, s.lon), green, sigma};
		};
		if (p.provider_id.empty()) {
			// Cached renders must not outlive a change to anything that shapes them.
			const json id = {{"latent", inputs.at("latent_raster")}, {"greenness", green}, {"noise_sigma", sigma},
			                 {"seed", c.seed}};
			p.provider_id = "synthetic-" + sha256_hex(id.dump()).substr(0, 16);
		}
	} else if (c.provider.kind == "cache") {
		p.kind = tiles::ProviderKind::CacheOnly;
	} else {
		p.kind = tiles::ProviderKind::HttpTemplate;
		p.url_template = c.provider.url_template;
	}
	return p;
}

std::vector<tiles::Tile> read_tiles(const fs::path& dir)
{
	const json index = json::parse(read_text(dir / "index.json"));
	std::vector<tiles::Tile> out;
	for (const auto& e : index)
		out.push_back(tiles::load_tile(dir / e.get<std::string>()));
	return out;
}

std::string features_csv(const std::vector<tiles::Tile>& ts, const Eigen::MatrixXd& F)
{
	std::vector<std::string> header = {"cluster_id", "tile_index"};
	for (Eigen::Index j = 0; j < F.cols(); ++j)
		header.push_back("f" + std::to_string(j));
	std::string out = csv::join(header) + "\n";
	for (std::size_t i = 0; i < ts.size(); ++i) {
		std::vector<std::string> row = {ts[i].spec.cluster_id, std::to_string(ts[i].spec.tile_index)};
		for (Eigen::Index j = 0; j < F.cols(); ++j)
			row.push_back(format_double(F(static_cast<Eigen::Index>(i), j)));
		out += csv::join(row) + "\n";
	}
	return out;
}

void read_features(const fs::path& file, std::vector<std::string>& ids, Eigen::MatrixXd& F)
{
	const auto t = csv::parse(read_text(file));
	if (t.header.size() < 2)
		throw Error("features.csv: bad header");
	const auto d = static_cast<Eigen::Index>(t.header.size() - 2);
	F.resize(static_cast<Eigen::Index>(t.rows.size()), d);
	ids.clear();
	for (std::size_t r = 0; r < t.rows.size(); ++r) {
		if (t.rows[r].size() != t.header.size())
			throw Error("features.csv: ragged row " + std::to_string(t.lines[r]));
		ids.push_back(t.rows[r][0]);
		for (Eigen::Index j = 0; j < d; ++j)
			F(static_cast<Eigen::Index>(r), j) =
			    survey::parse_number(t.rows[r][static_cast<std::size_t>(j) + 2], "features.csv");
	}
}

std::string metrics_csv(const Metrics& m)
{
	std::string out = "metric,value\n";
	auto row = [&](const std::string& k, double v) { out += k + "," + format_double(v) + "\n"; };
	row("bin_accuracy", m.bin_accuracy);
	row("train_accuracy", m.train_accuracy);
	row("best_alpha", m.best_alpha);
	row("pooled_r2", m.pooled_r2);
	row("mean_mse", m.mean_mse);
	for (std::size_t i = 0; i < m.per_fold_mse.size(); ++i)
		row("fold" + std::to_string(i) + "_mse", m.per_fold_mse[i]);
	for (std::size_t i = 0; i < m.per_fold_r2.size(); ++i)
		row("fold" + std::to_string(i) + "_r2", m.per_fold_r2[i]);
	return out;
}

json metrics_json(const Metrics& m)
{
	json r2 = json::array();
	for (double v : m.per_fold_r2)
		r2.push_back(number_or_null(v));
	return {{"bin_accuracy", number_or_null(m.bin_accuracy)},
	        {"train_accuracy", number_or_null(m.train_accuracy)},
	        {"best_alpha", m.best_alpha},
	        {"pooled_r2", m.pooled_r2},
	        {"mean_mse", m.mean_mse},
	        {"per_fold_mse", m.per_fold_mse},
	        {"per_fold_r2", r2}};
}

} // namespace

RunManifest run(const PipelineConfig& config, const RunOptions& options)
{
	config.validate();
	fs::create_directories(config.output_dir);
	DirLock lock(config.output_dir);

	Context ctx{config, options, config.output_dir / "stages", {}, {}};
	ctx.manifest.config_digest = config.digest();
	const auto& cov = config.active_covariate();
	ctx.inputs["households"] = file_digest(config.households);
	if (cov.is_delta()) {
		ctx.inputs["covariate_earlier"] = file_digest(cov.earlier);
		ctx.inputs["covariate_later"] = file_digest(cov.later);
	} else {
		ctx.inputs["covariate"] = file_digest(cov.raster);
	}
	if (config.provider.kind == "synthetic")
		ctx.inputs["latent_raster"] = file_digest(config.provider.latent_raster);
	if (config.zones)
		ctx.inputs["zones"] = file_digest(*config.zones);
	if (config.pretrained_weights)
		ctx.inputs["pretrained_weights"] = file_digest(*config.pretrained_weights);
	for (const auto& [k, v] : ctx.inputs)
		ctx.manifest.input_digests.emplace_back(k, v);

	auto reached = [&](Stage s) { return !options.until || static_cast<int>(s) <= static_cast<int>(*options.until); };
	json doc = {{"tool_version", kToolVersion},
	            {"config_digest", ctx.manifest.config_digest},
	            {"config", config_json(config, false)},
	            {"inputs", ctx.inputs},
	            {"decisions",
	             {{"cluster_consumption", "unweighted mean of household per-capita consumption"},
	              {"target_transform", regress::to_string(config.target_transform)},
	              {"alpha_selection", "max pooled out-of-fold R^2, ties to the smaller alpha"},
	              {"bin_accuracy", "validation accuracy on a cluster-grouped stratified split"},
	              {"normalization", "dataset statistics of the training split"},
	              {"zone_normalization", "min-max of zone means, 0 when all equal"}}}};
	json stages_doc = json::array();
	auto note = [&](const StageRecord& r) {
		stages_doc.push_back({{"stage", stage_name(r.stage)}, {"key", r.key}, {"output_digest", r.output_digest}});
	};

	// ingest
	const auto ingest = run_stage(ctx, Stage::Ingest,
	                              {{"households", ctx.inputs["households"]},
	                               {"covariate", cov.name},
	                               {"covariate_files", [&] {
		                                json f = json::array();
		                                for (const auto& p : cov.files())
			                                f.push_back(file_digest(p));
		                                return f;
	                                }()},
	                               {"delta", cov.is_delta()},
	                               {"half_extent_km", config.half_extent_km}},
	                              [&](const fs::path& dir) {
		                              const auto rows = survey::load_households(read_text(config.households));
		                              const auto clusters = survey::aggregate_clusters(rows);
		                              const auto grid = load_covariate(cov);
		                              const auto res =
		                                  survey::attach_covariate(clusters, grid, config.half_extent_km, cov.name);
		                              write_file_atomic(dir / "clusters.csv", survey::write_cluster_table(res.clusters));
		                              write_file_atomic(dir / "dropped.json",
		                                                json{{"dropped", res.dropped}, {"warnings", res.warnings}}.dump(2) +
		                                                    "\n");
	                              });
	note(ingest);
	const auto ingest_dir = stage_dir(ctx, ingest);
	const auto clusters = load_stage(ingest, [&] { return survey::read_cluster_table(read_text(ingest_dir / "clusters.csv")); });
	doc["dropped_clusters"] = load_stage(ingest, [&] { return json::parse(read_text(ingest_dir / "dropped.json")); });
	doc["counts"] = {{"clusters", clusters.size()}};

	std::optional<Metrics> metrics;
	std::vector<survey::ClusterRecord> binned;
	std::vector<tiles::Tile> tile_set;
	StageRecord bin_rec, tiles_rec, train_rec, feat_rec, reg_rec;
	convnet::ModelWeights<float> weights;
	convnet::NormStats norm;
	json train_metrics;
	regress::CvReport cv_report;

	if (reached(Stage::Bin)) {
		bin_rec = run_stage(ctx, Stage::Bin,
		                    {{"ingest", ingest.output_digest}, {"n_bins", config.n_bins}, {"seed", config.seed}},
		                    [&](const fs::path& dir) {
			                    std::vector<double> values;
			                    for (const auto& c : clusters)
				                    values.push_back(c.covariates.at(cov.name));
			                    binning::GmmOptions opt;
			                    opt.n_components = config.n_bins;
			                    opt.seed = config.seed;
			                    const auto model = binning::fit_gmm(values, opt);
			                    auto out = clusters;
			                    for (auto& c : out)
				                    c.bin = binning::assign_bin(model, c.covariates.at(cov.name));
			                    write_file_atomic(dir / "gmm.json", binning::to_json(model).dump(2) + "\n");
			                    write_file_atomic(dir / "clusters.csv", survey::write_cluster_table(out));
		                    });
		note(bin_rec);
		const auto d = stage_dir(ctx, bin_rec);
		binned = load_stage(bin_rec, [&] { return survey::read_cluster_table(read_text(d / "clusters.csv")); });
		doc["gmm"] = load_stage(bin_rec, [&] { return json::parse(read_text(d / "gmm.json")); });
	}

	if (reached(Stage::Tiles)) {
		json prov = config_json(config, false)["provider"];
		tiles_rec = run_stage(ctx, Stage::Tiles,
		                      {{"ingest", ingest.output_digest},
		                       {"tiles_per_side", config.tiles_per_side},
		                       {"half_extent_km", config.half_extent_km},
		                       {"provider", prov},
		                       {"latent", ctx.inputs.count("latent_raster") ? ctx.inputs["latent_raster"] : ""},
		                       {"seed", config.seed}},
		                      [&](const fs::path& dir) {
			                      std::vector<tiles::TileSpec> specs;
			                      for (const auto& c : clusters) {
				                      const auto s = tiles::plan_tiles(c, config.tiles_per_side, config.half_extent_km,
				                                                       config.provider.shape);
				                      specs.insert(specs.end(), s.begin(), s.end());
			                      }
			                      tiles::TileFetcher fetcher(provider_config(config, ctx.inputs));
			                      const auto fetched = fetcher.fetch_all(specs);
			                      json index = json::array();
			                      fs::create_directories(dir / "tiles");
			                      for (std::size_t i = 0; i < fetched.size(); ++i) {
				                      char name[32];
				                      std::snprintf(name, sizeof(name), "tiles/%05zu", i);
				                      tiles::save_tile(dir / name, fetched[i]);
				                      index.push_back(name);
			                      }
			                      write_file_atomic(dir / "index.json", index.dump(1) + "\n");
		                      });
		note(tiles_rec);
		tile_set = load_stage(tiles_rec, [&] { return read_tiles(stage_dir(ctx, tiles_rec)); });
		doc["counts"]["tiles"] = tile_set.size();
	}

	if (reached(Stage::Train)) {
		std::map<std::string, int> bin_of;
		for (const auto& c : binned)
			bin_of[c.cluster_id] = c.bin.value_or(0);
		train_rec = run_stage(
		    ctx, Stage::Train,
		    {{"bin", bin_rec.output_digest},
		     {"tiles", tiles_rec.output_digest},
		     {"network", config.network.to_json()},
		     {"train", config.train.to_json()},
		     {"pretrained", ctx.inputs.count("pretrained_weights") ? ctx.inputs["pretrained_weights"] : ""}},
		    [&](const fs::path& dir) {
			    std::vector<int> labels;
			    for (const auto& t : tile_set)
				    labels.push_back(bin_of.at(t.spec.cluster_id));
			    const auto init = config.pretrained_weights
			                          ? convnet::load_weights(read_file(*config.pretrained_weights), config.network)
			                          : convnet::build_network<float>(config.network, config.seed);
			    const auto res = convnet::train(init, tile_set, labels, config.train);
			    write_file_atomic(dir / "weights.tpw", convnet::save_weights(res.weights));
			    write_file_atomic(dir / "norm.json", res.stats.to_json().dump(2) + "\n");
			    write_file_atomic(dir / "history.csv", convnet::history_csv(res.history));
			    write_file_atomic(dir / "split.json",
			                      json{{"train", res.train_indices}, {"val", res.val_indices}}.dump() + "\n");
			    write_file_atomic(dir / "metrics.json", json{{"val_accuracy", number_or_null(res.val_accuracy)},
			                                                 {"train_accuracy", number_or_null(res.train_accuracy)}}
			                                                    .dump(2) +
			                                                "\n");
		    });
		note(train_rec);
		const auto d = stage_dir(ctx, train_rec);
		load_stage(train_rec, [&] {
			weights = convnet::load_weights(read_file(d / "weights.tpw"), config.network);
			norm = convnet::NormStats::from_json(json::parse(read_text(d / "norm.json")));
			train_metrics = json::parse(read_text(d / "metrics.json"));
			return 0;
		});
	}

	std::vector<std::string> feat_ids;
	Eigen::MatrixXd feats;
	if (reached(Stage::Features)) {
		feat_rec = run_stage(ctx, Stage::Features, {{"train", train_rec.output_digest}, {"tiles", tiles_rec.output_digest}},
		                     [&](const fs::path& dir) {
			                     const auto F = convnet::extract_features(weights, tile_set, norm);
			                     write_file_atomic(dir / "features.csv", features_csv(tile_set, F));
		                     });
		note(feat_rec);
		load_stage(feat_rec, [&] {
			read_features(stage_dir(ctx, feat_rec) / "features.csv", feat_ids, feats);
			return 0;
		});
	}

	if (reached(Stage::Regress)) {
		reg_rec = run_stage(ctx, Stage::Regress,
		                    {{"bin", bin_rec.output_digest},
		                     {"features", feat_rec.output_digest},
		                     {"cv", config.cv.to_json()},
		                     {"target_transform", regress::to_string(config.target_transform)}},
		                    [&](const fs::path& dir) {
			                    const auto fm =
			                        regress::aggregate_features(feat_ids, feats, binned, config.target_transform);
			                    const auto report = regress::cross_validate(fm, config.cv);
			                    write_file_atomic(dir / "cv_report.json", report.to_json().dump(2) + "\n");
			                    write_file_atomic(dir / "predictions.csv", report.predictions_csv());
		                    });
		note(reg_rec);
		cv_report = load_stage(reg_rec, [&] {
			return regress::CvReport::from_json(json::parse(read_text(stage_dir(ctx, reg_rec) / "cv_report.json")));
		});
		Metrics m;
		m.bin_accuracy = number_or_nan(train_metrics.at("val_accuracy"));
		m.train_accuracy = number_or_nan(train_metrics.at("train_accuracy"));
		m.best_alpha = cv_report.best_alpha;
		m.pooled_r2 = cv_report.pooled_r2;
		m.mean_mse = cv_report.mean_mse;
		m.per_fold_mse = cv_report.per_fold_mse;
		m.per_fold_r2 = cv_report.per_fold_r2;
		metrics = m;
		doc["metrics"] = metrics_json(m);
	}

	if (reached(Stage::Reports)) {
		const auto rep = run_stage(ctx, Stage::Reports,
		                           {{"regress", reg_rec.output_digest},
		                            {"train", train_rec.output_digest},
		                            {"bin", bin_rec.output_digest},
		                            {"zones", ctx.inputs.count("zones") ? ctx.inputs["zones"] : ""}},
		                           [&](const fs::path& dir) {
			                           reports::report_scatter(cv_report, dir / "scatter.csv");
			                           if (config.zones) {
				                           const auto zt = reports::parse_zone_table(read_text(*config.zones));
				                           const auto zr = reports::report_zones(cv_report, zt, binned, dir / "zones.csv");
				                           write_file_atomic(dir / "zone_warnings.json",
				                                             json{{"excluded", zr.excluded}, {"warnings", zr.warnings}}
				                                                     .dump(2) +
				                                                 "\n");
			                           }
			                           write_file_atomic(dir / "metrics.csv", metrics_csv(*metrics));
			                           fs::copy_file(stage_dir(ctx, train_rec) / "history.csv", dir / "history.csv");
		                           });
		note(rep);
		const fs::path out = config.output_dir / "reports";
		fs::create_directories(out);
		for (const auto& e : fs::directory_iterator(stage_dir(ctx, rep)))
			if (e.is_regular_file() && e.path().filename() != "done.json")
				fs::copy_file(e.path(), out / e.path().filename(), fs::copy_options::overwrite_existing);
	}

	doc["stages"] = stages_doc;
	ctx.manifest.metrics = metrics;
	ctx.manifest.document = doc;
	write_file_atomic(config.output_dir / "manifest.json", doc.dump(2) + "\n");

	json timings = json::array();
	for (const auto& r : ctx.manifest.stages)
		timings.push_back({{"stage", stage_name(r.stage)}, {"wall_seconds", r.wall_seconds}, {"cache_hit", r.cache_hit}});
	write_file_atomic(config.output_dir / "timings.json", timings.dump(2) + "\n");
	return ctx.manifest;
}

// ---------------------------------------------------------------------------
// Covariate comparison

std::string comparison_csv(const std::vector<ComparisonRow>& rows)
{
	std::string out = "covariate,bin_accuracy,best_alpha,pooled_r2\n";
	for (const auto& r : rows)
		out += csv::join({r.covariate, format_double(r.bin_accuracy), format_double(r.best_alpha),
		                  format_double(r.pooled_r2)}) +
		       "\n";
	return out;
}

std::vector<ComparisonRow> compare_covariates(const PipelineConfig& config, const std::vector<CovariateSource>& covariates,
                                              const RunOptions& options)
{
	if (covariates.size() < 2)
		invalid("compare_covariates needs at least two covariate rasters, got " + std::to_string(covariates.size()));
	std::vector<PipelineConfig> runs;
	for (const auto& cov : covariates) {
		PipelineConfig c = config;
		c.covariates = covariates;
		c.covariate = cov.name;
		c.output_dir = config.output_dir / "compare" / cov.name;
		c.validate();
		runs.push_back(std::move(c));
	}
	std::vector<ComparisonRow> rows;
	for (const auto& c : runs) {
		if (options.log)
			*options.log << "== covariate " << c.covariate << "\n";
		RunOptions o = options;
		o.until.reset();
		const auto m = run(c, o);
		rows.push_back({c.covariate, m.metrics->bin_accuracy, m.metrics->best_alpha, m.metrics->pooled_r2});
	}
	fs::create_directories(config.output_dir);
	write_file_atomic(config.output_dir / "comparison.csv", comparison_csv(rows));
	return rows;
}

json synthetic_config_json(std::uint64_t seed)
{
	return {
	    {"households", "households.csv"},
	    {"covariates",
	     {{{"name", "temperature_delta"}, {"earlier", "temp_earlier.tif"}, {"later", "temp_later.tif"}},
	      {{"name", "noise"}, {"raster", "noise.tif"}}}},
	    {"covariate", "temperature_delta"},
	    {"tile_cache_dir", "cache/tiles"},
	    {"output_dir", "output"},
	    {"zones", "zones.csv"},
	    {"provider", {{"kind", "synthetic"}, {"latent_raster", "latent.tif"}, {"greenness", 0.15}, {"noise_sigma", 12.0}}},
	    {"network", {{"preset", "mini"}}},
	    {"seed", seed},
	};
}

} // namespace terrapov::pipeline

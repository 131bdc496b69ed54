#pragma once

#include "terrapov/common.hpp"
#include "terrapov/survey.hpp"

#include <json.hpp>

#include <atomic>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

namespace terrapov::tiles {

enum class TileErrc
{
	CacheMiss,
	FetchFailed,
	DecodeFailed,
	InvalidSpec,
};

using TileError = CodedError<TileErrc>;

struct TileSpec
{
	std::string cluster_id;
	int tile_index = 0;
	double lat = 0.0;
	double lon = 0.0;
	int zoom = 16;
	int width = 64;
	int height = 64;

	bool operator==(const TileSpec&) const = default;
};

/// Zoom in [1, 21], square-ish sizes from the 64/128/224 presets.
void validate(const TileSpec& spec);

struct Tile
{
	TileSpec spec;
	/// Row-major RGB8, 3 bytes per pixel.
	Bytes pixels;

	bool operator==(const Tile&) const = default;
};

/// Scene parameters the synthetic generator renders.
struct SceneLatent
{
	double temperature_delta = 0.0;
	double greenness = 0.0;
	double noise_sigma = 0.0;
};

/// Rendering constants of the synthetic generator.
struct SyntheticStyle
{
	/// Temperature range mapped onto the red/blue ramp.
	double t_min = 0.0;
	double t_max = 3.0;
	int red_low = 60;
	int red_span = 140;
	int blue_high = 200;
	int green_base = 90;
	int patch_size = 8;
};

struct TileShape
{
	int zoom = 16;
	int width = 64;
	int height = 64;
};

/// m x m tile centers on an even partition of the cluster's km box,
/// row-major from the north-west corner.
std::vector<TileSpec> plan_tiles(const survey::ClusterRecord& cluster, int grid_m, double half_extent_km,
                                 const TileShape& shape = {});

/// Deterministic procedural tile. All pixel arithmetic is integer once the
/// latent has been quantized, so output is bit-identical across platforms.
Tile generate_synthetic(const TileSpec& spec, const SceneLatent& latent, std::uint64_t seed,
                        const SyntheticStyle& style = {});

Bytes encode_ppm(const Tile& tile);
/// Decodes a binary P6 / maxval 255 image. The spec is filled with the decoded
/// dimensions only.
Tile decode_ppm(std::span<const std::uint8_t> bytes);

nlohmann::json spec_to_json(const TileSpec& spec);
TileSpec spec_from_json(const nlohmann::json& j);

/// Writes <stem>.ppm and the <stem>.json sidecar.
void save_tile(const std::filesystem::path& stem, const Tile& tile);
Tile load_tile(const std::filesystem::path& stem);

// ---------------------------------------------------------------------------
// Providers

enum class ProviderKind
{
	Synthetic,
	CacheOnly,
	HttpTemplate,
};

using LatentSource = std::function<SceneLatent(const TileSpec&)>;

struct ProviderConfig
{
	ProviderKind kind = ProviderKind::Synthetic;
	/// Empty disables caching for the synthetic provider. Required otherwise.
	std::filesystem::path cache_dir;
	/// Names the cache namespace; defaults per kind when empty.
	std::string provider_id;
	// http
	std::string url_template;
	int timeout_seconds = 30;
	// synthetic
	std::uint64_t seed = 0;
	SyntheticStyle style;
	LatentSource latent;
	/// Bounded parallelism for fetch_tiles.
	int max_in_flight = 4;
};

/// "TERRAPOV_OFFLINE=1" in the environment forces cache-only fetching.
bool offline_mode();

/// Cache key: provider id, coordinates rounded to 1e-6 degrees, zoom and size.
std::string cache_key(const std::string& provider_id, const TileSpec& spec);

/// Substitutes {lat},{lon},{zoom},{w},{h} in a URL template.
std::string expand_url(const std::string& url_template, const TileSpec& spec);

class TileFetcher
{
public:
	explicit TileFetcher(ProviderConfig config);

	Tile fetch(const TileSpec& spec);
	/// Fetches in parallel (at most max_in_flight at once); results keep input order.
	std::vector<Tile> fetch_all(const std::vector<TileSpec>& specs);

	const std::string& provider_id() const { return provider_id_; }
	/// Upstream requests issued (HTTP GETs or synthetic renders).
	std::size_t upstream_requests() const { return upstream_.load(); }
	std::size_t cache_hits() const { return hits_.load(); }

private:
	std::optional<Tile> cache_lookup(const std::string& key, const TileSpec& spec) const;
	void cache_store(const std::string& key, const Tile& tile) const;
	Tile fetch_upstream(const TileSpec& spec);
	std::mutex& key_mutex(const std::string& key);

	ProviderConfig config_;
	std::string provider_id_;
	std::atomic<std::size_t> upstream_{0};
	std::atomic<std::size_t> hits_{0};
	std::mutex map_mutex_;
	std::map<std::string, std::unique_ptr<std::mutex>> key_mutexes_;
};

/// Convenience wrapper around a one-off TileFetcher.
Tile fetch_tile(const ProviderConfig& provider, const TileSpec& spec);

} // namespace terrapov::tiles

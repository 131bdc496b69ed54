#include "terrapov/tiles.hpp"

#include "terrapov/raster.hpp"

#include <algorithm>
#include <cmath>

namespace terrapov::tiles {

void validate(const TileSpec& spec)
{
	auto preset = [](int v) { return v == 64 || v == 128 || v == 224; };
	if (spec.zoom < 1 || spec.zoom > 21)
		throw TileError(TileErrc::InvalidSpec, "tile: zoom " + std::to_string(spec.zoom) + " outside [1, 21]");
	if (!preset(spec.width) || !preset(spec.height))
		throw TileError(TileErrc::InvalidSpec, "tile: size " + std::to_string(spec.width) + "x" +
		                                           std::to_string(spec.height) + " is not a 64/128/224 preset");
}

std::vector<TileSpec> plan_tiles(const survey::ClusterRecord& cluster, int grid_m, double half_extent_km,
                                 const TileShape& shape)
{
	if (grid_m < 1)
		throw TileError(TileErrc::InvalidSpec, "plan_tiles: grid_m must be >= 1");
	if (!(half_extent_km > 0.0))
		throw TileError(TileErrc::InvalidSpec, "plan_tiles: half extent must be positive");
	const auto deg_per_km = raster::km_to_degrees(cluster.lat, 1.0);

	std::vector<TileSpec> out;
	out.reserve(static_cast<std::size_t>(grid_m * grid_m));
	for (int r = 0; r < grid_m; ++r) {
		// Row 0 is the northernmost; the centered offset (2i + 1 - m) * h / m is exactly 0 for the middle cell.
		const double north_km = static_cast<double>(grid_m - 1 - 2 * r) * half_extent_km / grid_m;
		for (int c = 0; c < grid_m; ++c) {
			const double east_km = static_cast<double>(2 * c + 1 - grid_m) * half_extent_km / grid_m;
			TileSpec s;
			s.cluster_id = cluster.cluster_id;
			s.tile_index = r * grid_m + c;
			s.lat = cluster.lat + north_km * deg_per_km.dlat;
			s.lon = cluster.lon + east_km * deg_per_km.dlon;
			s.zoom = shape.zoom;
			s.width = shape.width;
			s.height = shape.height;
			validate(s);
			out.push_back(std::move(s));
		}
	}
	return out;
}

Tile generate_synthetic(const TileSpec& spec, const SceneLatent& latent, std::uint64_t seed, const SyntheticStyle& style)
{
	if (!(latent.greenness >= 0.0 && latent.greenness <= 1.0))
		throw TileError(TileErrc::InvalidSpec, "synthetic: greenness must lie in [0, 1]");
	if (!(latent.noise_sigma >= 0.0))
		throw TileError(TileErrc::InvalidSpec, "synthetic: noise_sigma must be >= 0");
	if (!(style.t_max > style.t_min))
		throw TileError(TileErrc::InvalidSpec, "synthetic: t_max must exceed t_min");
	if (spec.width < 1 || spec.height < 1)
		throw TileError(TileErrc::InvalidSpec, "synthetic: empty tile");

	// Quantize the latent; everything below is integer arithmetic.
	const double frac = (latent.temperature_delta - style.t_min) / (style.t_max - style.t_min);
	const std::int64_t ramp = std::clamp<std::int64_t>(std::llround(frac * 1000.0), 0, 1000);
	const std::int64_t green_permille = std::llround(latent.greenness * 1000.0);
	const std::int64_t sigma_milli = std::llround(latent.noise_sigma * 1000.0);

	const std::int64_t shift = (style.red_span * ramp + 500) / 1000;
	const std::int64_t base[3] = {style.red_low + shift, style.green_base, style.blue_high - shift};
	static constexpr std::int64_t patch[3] = {40, 150, 50};

	SplitMix64 rng(hash_seed(seed, {fnv1a(spec.cluster_id), static_cast<std::uint64_t>(spec.tile_index)}));

	const int w = spec.width, h = spec.height, ps = std::max(1, style.patch_size);
	const int cells_x = (w + ps - 1) / ps, cells_y = (h + ps - 1) / ps;
	std::vector<std::uint8_t> green(static_cast<std::size_t>(cells_x * cells_y), 0);
	for (auto& g : green)
		g = static_cast<std::int64_t>(rng.below(1000)) < green_permille ? 1 : 0;

	// Sum of four 16-bit uniforms, centered; its standard deviation is 65536 * sqrt(1/3).
	constexpr std::int64_t kCenter = 131070;
	constexpr std::int64_t kSdTimes1000 = 37837227;
	Tile t;
	t.spec = spec;
	t.pixels.resize(static_cast<std::size_t>(w) * h * 3);
	std::size_t i = 0;
	for (int y = 0; y < h; ++y) {
		for (int x = 0; x < w; ++x) {
			const bool is_patch = green[static_cast<std::size_t>((y / ps) * cells_x + x / ps)] != 0;
			for (int ch = 0; ch < 3; ++ch) {
				std::int64_t v = is_patch ? patch[ch] : base[ch];
				if (sigma_milli > 0) {
					std::int64_t s = -kCenter;
					for (int k = 0; k < 4; ++k)
						s += static_cast<std::int64_t>(rng.next() >> 48);
					const std::int64_t num = s * sigma_milli;
					v += (num >= 0 ? num + kSdTimes1000 / 2 : num - kSdTimes1000 / 2) / kSdTimes1000;
				}
				t.pixels[i++] = static_cast<std::uint8_t>(std::clamp<std::int64_t>(v, 0, 255));
			}
		}
	}
	return t;
}

Bytes encode_ppm(const Tile& tile)
{
	const std::size_t n = static_cast<std::size_t>(tile.spec.width) * tile.spec.height * 3;
	if (tile.pixels.size() != n)
		throw TileError(TileErrc::InvalidSpec, "encode_ppm: pixel buffer does not match dimensions");
	const std::string header = "P6\n" + std::to_string(tile.spec.width) + " " + std::to_string(tile.spec.height) + "\n255\n";
	Bytes out(header.begin(), header.end());
	out.insert(out.end(), tile.pixels.begin(), tile.pixels.end());
	return out;
}

Tile decode_ppm(std::span<const std::uint8_t> bytes)
{
	std::size_t pos = 0;
	auto fail = [](const std::string& msg) -> void { throw TileError(TileErrc::DecodeFailed, "decode_ppm: " + msg); };
	auto skip_space = [&] {
		while (pos < bytes.size()) {
			if (bytes[pos] == '#') {
				while (pos < bytes.size() && bytes[pos] != '\n')
					++pos;
			} else if (std::isspace(bytes[pos]))
				++pos;
			else
				break;
		}
	};
	auto read_int = [&]() -> long {
		skip_space();
		long v = 0;
		const std::size_t start = pos;
		while (pos < bytes.size() && std::isdigit(bytes[pos]) && pos - start < 9)
			v = v * 10 + (bytes[pos++] - '0');
		if (pos == start)
			fail("malformed header");
		return v;
	};

	if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6')
		fail("not a binary PPM (P6)");
	pos = 2;
	const long w = read_int();
	const long h = read_int();
	const long maxval = read_int();
	if (maxval != 255)
		fail("maxval " + std::to_string(maxval) + " is not 255");
	if (w < 1 || h < 1)
		fail("empty image");
	if (pos >= bytes.size() || !std::isspace(bytes[pos]))
		fail("malformed header");
	++pos;
	const std::size_t n = static_cast<std::size_t>(w) * static_cast<std::size_t>(h) * 3;
	if (bytes.size() - pos < n)
		fail("payload has " + std::to_string(bytes.size() - pos) + " of " + std::to_string(n) + " bytes");
	Tile t;
	t.spec.width = static_cast<int>(w);
	t.spec.height = static_cast<int>(h);
	t.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.begin() + static_cast<std::ptrdiff_t>(pos + n));
	return t;
}

nlohmann::json spec_to_json(const TileSpec& s)
{
	return {{"cluster_id", s.cluster_id}, {"tile_index", s.tile_index}, {"lat", s.lat}, {"lon", s.lon},
	        {"zoom", s.zoom},             {"width", s.width},           {"height", s.height}};
}

TileSpec spec_from_json(const nlohmann::json& j)
{
	TileSpec s;
	s.cluster_id = j.at("cluster_id").get<std::string>();
	s.tile_index = j.at("tile_index").get<int>();
	s.lat = j.at("lat").get<double>();
	s.lon = j.at("lon").get<double>();
	s.zoom = j.at("zoom").get<int>();
	s.width = j.at("width").get<int>();
	s.height = j.at("height").get<int>();
	return s;
}

void save_tile(const std::filesystem::path& stem, const Tile& tile)
{
	auto ppm = stem;
	ppm += ".ppm";
	auto side = stem;
	side += ".json";
	write_file_atomic(ppm, encode_ppm(tile));
	write_file_atomic(side, spec_to_json(tile.spec).dump());
}

Tile load_tile(const std::filesystem::path& stem)
{
	auto ppm = stem;
	ppm += ".ppm";
	auto side = stem;
	side += ".json";
	Tile t = decode_ppm(read_file(ppm));
	const TileSpec spec = spec_from_json(nlohmann::json::parse(read_text(side)));
	if (spec.width != t.spec.width || spec.height != t.spec.height)
		throw TileError(TileErrc::DecodeFailed, "load_tile: sidecar size disagrees with " + ppm.string());
	t.spec = spec;
	return t;
}

} // namespace terrapov::tiles

#include "terrapov/synthetic_world.hpp"

#include "terrapov/csv.hpp"

#include <cmath>
#include <cstdio>
#include <limits>

namespace terrapov::synth {

namespace {

struct Site
{
	double lat;
	double lon;
};

double distance_km(double lat1, double lon1, double lat2, double lon2)
{
	const double mid = (lat1 + lat2) / 2.0;
	const double dy = (lat1 - lat2) * raster::kKmPerDegreeLat;
	const double dx = (lon1 - lon2) * raster::kKmPerDegreeLonEquator * std::cos(mid * std::acos(-1.0) / 180.0);
	return std::sqrt(dx * dx + dy * dy);
}

std::string cluster_name(int i)
{
	char buf[16];
	std::snprintf(buf, sizeof(buf), "C%03d", i + 1);
	return buf;
}

raster::RasterGrid empty_grid(const WorldOptions& o)
{
	raster::RasterGrid g;
	g.width = g.height = static_cast<std::size_t>(std::llround(o.extent_deg / o.pixel_deg));
	g.transform.origin_lon = o.west;
	g.transform.origin_lat = o.north;
	g.transform.pixel_width = o.pixel_deg;
	g.transform.pixel_height = o.pixel_deg;
	g.nodata = -9999.0;
	g.values.assign(g.width * g.height, 0.0);
	return g;
}

// Rounds to float32 so the rasters hold exactly what the writer stores.
double f32(double v)
{
	return static_cast<double>(static_cast<float>(v));
}

} // namespace

World make_world(const WorldOptions& o)
{
	if (o.n_clusters < 1 || o.extent_deg <= 2.0 * o.margin_deg || o.households_min < 1 ||
	    o.households_max < o.households_min)
		throw Error("synthetic world: invalid options");

	SplitMix64 rng(hash_seed(o.seed, {0x776f726cULL}));
	std::vector<Site> sites;
	const double span = o.extent_deg - 2.0 * o.margin_deg;
	for (int attempts = 0; static_cast<int>(sites.size()) < o.n_clusters; ++attempts) {
		if (attempts > 100000)
			throw Error("synthetic world: cannot place clusters with the requested separation");
		const Site s{o.north - o.margin_deg - rng.uniform() * span, o.west + o.margin_deg + rng.uniform() * span};
		bool ok = true;
		for (const auto& t : sites)
			if (distance_km(s.lat, s.lon, t.lat, t.lon) < o.min_separation_km)
				ok = false;
		if (ok)
			sites.push_back(s);
	}

	World w;
	std::vector<double> temp(sites.size()), noise_value(sites.size());
	const double mid_lat = o.north - o.extent_deg / 2.0, mid_lon = o.west + o.extent_deg / 2.0;
	for (std::size_t i = 0; i < sites.size(); ++i) {
		const std::string id = cluster_name(static_cast<int>(i));
		// Cycle through the modes so each one gets a third of the clusters.
		temp[i] = o.modes[i % o.modes.size()] + o.mode_sd * rng.normal();
		noise_value[i] = rng.uniform();
		w.cluster_temperature[id] = temp[i];
		w.cluster_zone[id] = (sites[i].lat < mid_lat ? 2 : 0) + (sites[i].lon < mid_lon ? 0 : 1);
	}

	w.earlier = empty_grid(o);
	w.later = empty_grid(o);
	w.latent = empty_grid(o);
	w.noise = empty_grid(o);
	for (std::size_t r = 0; r < w.latent.height; ++r) {
		const double lat = w.latent.transform.center_lat(r);
		for (std::size_t c = 0; c < w.latent.width; ++c) {
			const double lon = w.latent.transform.center_lon(c);
			std::size_t best = 0;
			double best_d = std::numeric_limits<double>::infinity();
			for (std::size_t i = 0; i < sites.size(); ++i) {
				const double d = distance_km(lat, lon, sites[i].lat, sites[i].lon);
				if (d < best_d) {
					best_d = d;
					best = i;
				}
			}
			const double delta = f32(temp[best] + o.pixel_noise * rng.normal());
			const double base = f32(18.0 + 4.0 * (lat - mid_lat) / o.extent_deg + 0.05 * rng.normal());
			w.latent.at(c, r) = delta;
			w.earlier.at(c, r) = base;
			w.later.at(c, r) = f32(base + delta);
			w.noise.at(c, r) = f32(noise_value[best]);
		}
	}

	int hh = 0;
	for (std::size_t i = 0; i < sites.size(); ++i) {
		const std::string id = cluster_name(static_cast<int>(i));
		const double pc = o.consumption_base + o.consumption_slope * (temp[i] - 1.5) + o.consumption_noise * rng.normal();
		const int n = o.households_min +
		              static_cast<int>(rng.below(static_cast<std::uint64_t>(o.households_max - o.households_min + 1)));
		for (int k = 0; k < n; ++k) {
			survey::HouseholdRow row;
			char buf[24];
			std::snprintf(buf, sizeof(buf), "H%05d", ++hh);
			row.household_id = buf;
			row.cluster_id = id;
			// Households scatter within about a kilometre of the cluster center.
			row.lat = std::round((sites[i].lat + 0.004 * rng.normal()) * 1e6) / 1e6;
			row.lon = std::round((sites[i].lon + 0.004 * rng.normal()) * 1e6) / 1e6;
			row.household_size = 1 + static_cast<int>(rng.below(8));
			const double annual = pc * row.household_size * (1.0 + 0.02 * rng.normal());
			row.annual_consumption = std::max(0.0, std::round(annual * 100.0) / 100.0);
			w.households.push_back(row);
		}
	}
	return w;
}

std::string households_csv(const std::vector<survey::HouseholdRow>& rows)
{
	std::string out = "household_id,cluster_id,lat,lon,annual_consumption,household_size\n";
	for (const auto& r : rows)
		out += csv::join({r.household_id, r.cluster_id, format_double(r.lat), format_double(r.lon),
		                  format_double(r.annual_consumption), std::to_string(r.household_size)}) +
		       "\n";
	return out;
}

std::string zones_csv(const World& world)
{
	static const char* names[4] = {"North-West", "North-East", "South-West", "South-East"};
	std::string out = "cluster_id,zone_id,zone_name\n";
	for (const auto& [id, z] : world.cluster_zone)
		out += csv::join({id, "Z" + std::to_string(z + 1), names[z]}) + "\n";
	return out;
}

void write_world(const World& world, const std::filesystem::path& dir)
{
	std::filesystem::create_directories(dir);
	write_file_atomic(dir / "households.csv", households_csv(world.households));
	raster::save_geotiff(dir / "temp_earlier.tif", world.earlier);
	raster::save_geotiff(dir / "temp_later.tif", world.later);
	raster::save_geotiff(dir / "latent.tif", world.latent);
	raster::save_geotiff(dir / "noise.tif", world.noise);
	write_file_atomic(dir / "zones.csv", zones_csv(world));
}

} // namespace terrapov::synth

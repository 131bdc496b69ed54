#pragma once

// Generator for a small planted-signal dataset: a households table, a pair of
// temperature rasters whose difference carries the signal, the latent field
// the synthetic tile provider renders, an uninformative covariate, and a zone
// table.

#include "terrapov/raster.hpp"
#include "terrapov/survey.hpp"

#include <array>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace terrapov::synth {

struct WorldOptions
{
	std::uint64_t seed = 7;
	int n_clusters = 30;
	/// North-west corner and side length of the square region, degrees.
	double north = 10.0;
	double west = 38.0;
	double extent_deg = 2.0;
	double pixel_deg = 1.0 / 120.0;
	/// Cluster centers keep this far from the region edge.
	double margin_deg = 0.15;
	double min_separation_km = 25.0;
	/// Cluster temperature deltas are drawn around these modes.
	std::array<double, 3> modes = {0.5, 1.5, 2.5};
	double mode_sd = 0.1;
	double pixel_noise = 0.01;
	int households_min = 6;
	int households_max = 12;
	/// Per-capita consumption = base + slope * (t - 1.5) + noise.
	double consumption_base = 3000.0;
	double consumption_slope = -800.0;
	double consumption_noise = 100.0;
};

struct World
{
	std::vector<survey::HouseholdRow> households;
	raster::RasterGrid earlier;
	raster::RasterGrid later;
	/// Temperature delta rendered by the synthetic provider.
	raster::RasterGrid latent;
	/// Per-cluster uniform values, independent of consumption.
	raster::RasterGrid noise;
	/// cluster_id -> planted temperature delta.
	std::map<std::string, double> cluster_temperature;
	/// cluster_id -> zone index (quadrant, 0..3).
	std::map<std::string, int> cluster_zone;
};

World make_world(const WorldOptions& options = {});

std::string households_csv(const std::vector<survey::HouseholdRow>& rows);
std::string zones_csv(const World& world);

/// Writes households.csv, temp_earlier.tif, temp_later.tif, latent.tif,
/// noise.tif and zones.csv into `dir`.
void write_world(const World& world, const std::filesystem::path& dir);

} // namespace terrapov::synth

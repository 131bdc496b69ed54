#pragma once

#include "terrapov/common.hpp"
#include "terrapov/raster.hpp"

#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace terrapov::survey {

enum class SurveyErrc
{
	MissingColumn,
	BadValue,
	EmptyFile,
	AllClustersDropped,
};

using SurveyError = CodedError<SurveyErrc>;

struct HouseholdRow
{
	std::string household_id;
	std::string cluster_id;
	double lat = 0.0;
	double lon = 0.0;
	double annual_consumption = 0.0;
	int household_size = 1;
};

struct ClusterRecord
{
	std::string cluster_id;
	double lat = 0.0;
	double lon = 0.0;
	double consumption_per_capita = 0.0;
	std::size_t n_households = 0;
	std::map<std::string, double> covariates;
	std::optional<int> bin;

	bool operator==(const ClusterRecord&) const = default;
};

/// Parses the household CSV (header: household_id, cluster_id, lat, lon,
/// annual_consumption, household_size; extra columns are ignored).
std::vector<HouseholdRow> load_households(std::string_view csv_text);

inline double per_capita(const HouseholdRow& row)
{
	return row.annual_consumption / static_cast<double>(row.household_size);
}

/// One record per cluster, sorted by cluster_id. Consumption is the unweighted
/// mean of member per-capita values; location is the mean member coordinate.
std::vector<ClusterRecord> aggregate_clusters(std::span<const HouseholdRow> rows);

struct AttachResult
{
	std::vector<ClusterRecord> clusters;
	std::vector<std::string> dropped;
	std::vector<std::string> warnings;
};

/// Adds covariates[name] = box mean around each cluster. Clusters without
/// valid raster coverage are dropped and reported.
AttachResult attach_covariate(std::span<const ClusterRecord> clusters, const raster::RasterGrid& grid,
                              double half_extent_km, const std::string& name);

/// cluster_id,lat,lon,consumption_per_capita,n_households,<covariates...>,bin
std::string write_cluster_table(std::span<const ClusterRecord> clusters);
std::vector<ClusterRecord> read_cluster_table(std::string_view csv_text);

double parse_number(std::string_view field, const std::string& what);

} // namespace terrapov::survey
